//! Weighted stiffness, trace mass and time-averaged loads.
//!
//! The cylinder bilinear form is
//! `a_Y(w, φ) = (1/d_s) ∫ y^α (∇w·∇φ + c w φ)` on Ω × (0, Y). On a cell
//! `K × I` it factors into one-dimensional pieces: the Q1 mass and stiffness
//! on `K`, and the y^α-weighted P1 mass and stiffness on `I`, which are
//! integrated in closed form.

use crate::mesh::{CylinderMesh, OmegaMesh};
use crate::problem::{checked, FractionalParams, TimeGrid};
use crate::quadrature::{cell_rule, GAUSS2};
use crate::{Error, Result};

/// `∫ y^α φ_i φ_j` and `∫ y^α φ_i' φ_j'` over one axis interval for the
/// two local hat functions (left node first).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedIntegrals {
    pub mass: [[f64; 2]; 2],
    pub stiffness: [[f64; 2]; 2],
}

/// Exact y^α-weighted P1 element integrals on `[y0, y1]`.
///
/// Near the origin (`y0 < 2h`) the power moments are combined directly.
/// Away from it the weight is expanded as `y0^α (1 + (h/y0) t)^α`, whose
/// binomial series converges at least like `2^{-k}` and avoids the
/// cancellation of the moment formula.
pub fn weight_integrals(y0: f64, y1: f64, alpha: f64) -> Result<WeightedIntegrals> {
    if !(alpha > -1.0) {
        return Err(Error::NonIntegrableWeight(alpha));
    }
    if !(y0 >= 0.0 && y1 > y0) || !y1.is_finite() {
        return Err(Error::ParameterDomain(format!("interval [{y0}, {y1}]")));
    }
    let h = y1 - y0;
    let (m00, m01, m11, w0) = if y0 < 2.0 * h {
        let moment = |p: f64| {
            let q = alpha + p + 1.0;
            (y1.powf(q) - y0.powf(q)) / q
        };
        let (p0, p1, p2) = (moment(0.0), moment(1.0), moment(2.0));
        let h2 = h * h;
        (
            (y1 * y1 * p0 - 2.0 * y1 * p1 + p2) / h2,
            ((y0 + y1) * p1 - y0 * y1 * p0 - p2) / h2,
            (p2 - 2.0 * y0 * p1 + y0 * y0 * p0) / h2,
            p0,
        )
    } else {
        let r = h / y0;
        let scale = h * y0.powf(alpha);
        let (mut s00, mut s01, mut s11, mut s0) = (0.0, 0.0, 0.0, 0.0);
        let mut coeff = 1.0; // binom(alpha, k) r^k
        for k in 0..400 {
            let kf = k as f64;
            let t00 = coeff * 2.0 / ((kf + 1.0) * (kf + 2.0) * (kf + 3.0));
            let t01 = coeff / ((kf + 2.0) * (kf + 3.0));
            let t11 = coeff / (kf + 3.0);
            let t0 = coeff / (kf + 1.0);
            s00 += t00;
            s01 += t01;
            s11 += t11;
            s0 += t0;
            if t0.abs() < 1e-18 * s0.abs() && k > 2 {
                break;
            }
            coeff *= (alpha - kf) / (kf + 1.0) * r;
            if coeff == 0.0 {
                break;
            }
        }
        (scale * s00, scale * s01, scale * s11, scale * s0)
    };
    let k = w0 / (h * h);
    Ok(WeightedIntegrals {
        mass: [[m00, m01], [m01, m11]],
        stiffness: [[k, -k], [-k, k]],
    })
}

/// Square sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    /// Build from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_unstable_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.dim) {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        self.apply(x, &mut y);
        y
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.dim)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>())
            .sum()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = self
            .entries()
            .fold(0.0f64, |m, (i, j, v)| m.max((v - self.get(j, i)).abs()));
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, other: &SparseOperator, factor: f64) -> Self {
        assert_eq!(self.dim, other.dim);
        let triplets: Vec<_> = self
            .entries()
            .chain(other.entries().map(|(i, j, v)| (i, j, factor * v)))
            .collect();
        Self::from_triplets(self.dim, &triplets)
    }

    /// Principal submatrix on the indices `keep[old] = Some(new)`.
    pub fn restrict(&self, keep: &[Option<usize>], new_dim: usize) -> Self {
        let triplets: Vec<_> = self
            .entries()
            .filter_map(|(i, j, v)| Some((keep[i]?, keep[j]?, v)))
            .collect();
        Self::from_triplets(new_dim, &triplets)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.entries().collect()
    }
}

fn one_d_p1(h: f64) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    (
        [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]],
        [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]],
    )
}

/// Q1 mass and stiffness on a cell of Ω, in the local order of
/// [`OmegaMesh::cell_vertices`].
pub(crate) fn omega_element(omega: &OmegaMesh) -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
    let (m1, k1) = one_d_p1(omega.h());
    let mut mass = [[0.0; 4]; 4];
    let mut stiff = [[0.0; 4]; 4];
    match omega.dim() {
        1 => {
            for a in 0..2 {
                for b in 0..2 {
                    mass[a][b] = m1[a][b];
                    stiff[a][b] = k1[a][b];
                }
            }
        }
        _ => {
            for a in 0..4 {
                for b in 0..4 {
                    let (a1, a2, b1, b2) = (a % 2, a / 2, b % 2, b / 2);
                    mass[a][b] = m1[a1][b1] * m1[a2][b2];
                    stiff[a][b] = k1[a1][b1] * m1[a2][b2] + m1[a1][b1] * k1[a2][b2];
                }
            }
        }
    }
    (mass, stiff)
}

/// Weighted stiffness of `a_Y` on the free nodes of the cylinder.
pub fn assemble_stiffness(
    mesh: &CylinderMesh,
    params: &FractionalParams,
    reaction: f64,
) -> Result<SparseOperator> {
    if !(reaction >= 0.0) {
        return Err(Error::ParameterDomain(format!("reaction {reaction} < 0")));
    }
    let omega = mesh.omega();
    let axis = mesh.axis();
    let vpc = omega.vertices_per_cell();
    let (mx, kx) = omega_element(omega);
    let axis_elems: Vec<WeightedIntegrals> = (0..axis.intervals())
        .map(|i| {
            let (y0, y1) = axis.interval(i);
            weight_integrals(y0, y1, params.alpha)
        })
        .collect::<Result<_>>()?;
    let inv_ds = 1.0 / params.d_s;
    let mut triplets = Vec::with_capacity(omega.n_cells() * axis.intervals() * (2 * vpc).pow(2));
    for c in 0..omega.n_cells() {
        let verts = omega.cell_vertices(c);
        for (i, el) in axis_elems.iter().enumerate() {
            for a in 0..vpc {
                for b in 0..2 {
                    let Some(row) = mesh.free_index(mesh.node(verts[a], i + b)) else {
                        continue;
                    };
                    for a2 in 0..vpc {
                        for b2 in 0..2 {
                            let Some(col) = mesh.free_index(mesh.node(verts[a2], i + b2)) else {
                                continue;
                            };
                            let v = kx[a][a2] * el.mass[b][b2]
                                + mx[a][a2] * el.stiffness[b][b2]
                                + reaction * mx[a][a2] * el.mass[b][b2];
                            triplets.push((row, col, inv_ds * v));
                        }
                    }
                }
            }
        }
    }
    Ok(SparseOperator::from_triplets(mesh.n_free(), &triplets))
}

/// Q1 mass matrix of Ω indexed by Ω vertex, boundary vertices included.
pub fn omega_mass(omega: &OmegaMesh) -> SparseOperator {
    let vpc = omega.vertices_per_cell();
    let (mx, _) = omega_element(omega);
    let mut triplets = Vec::with_capacity(omega.n_cells() * vpc * vpc);
    for c in 0..omega.n_cells() {
        let verts = omega.cell_vertices(c);
        for a in 0..vpc {
            for b in 0..vpc {
                triplets.push((verts[a], verts[b], mx[a][b]));
            }
        }
    }
    SparseOperator::from_triplets(omega.n_vertices(), &triplets)
}

/// Mass matrix on Ω × {0}, embedded in the full cylinder node numbering
/// (rows of nodes with y > 0 are empty).
pub fn assemble_trace_mass(mesh: &CylinderMesh) -> SparseOperator {
    let mass = omega_mass(mesh.omega());
    let triplets: Vec<_> = mass
        .entries()
        .map(|(i, j, v)| (mesh.trace_node(i), mesh.trace_node(j), v))
        .collect();
    SparseOperator::from_triplets(mesh.n_nodes(), &triplets)
}

/// `⟨f^{k+1}, φ_v⟩` for every Ω vertex, where `f^{k+1}` is the average of
/// `f` over `[t_k, t_{k+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadVector {
    /// Index `k + 1` of the step the load belongs to.
    pub step: usize,
    pub values: Vec<f64>,
}

/// Time-averaged load of step `k` (interval `[t_k, t_{k+1}]`).
///
/// Space: three-point tensor Gauss per cell. Time: two-point Gauss.
pub fn assemble_load(
    f: &(dyn Fn(&[f64], f64) -> f64 + Send + Sync),
    k: usize,
    grid: &TimeGrid,
    mesh: &CylinderMesh,
) -> Result<LoadVector> {
    if k >= grid.steps {
        return Err(Error::DimensionMismatch(format!(
            "step {k} outside 0..{}",
            grid.steps
        )));
    }
    let (values, _) = averaged_load(f, k, grid, mesh.omega())?;
    Ok(LoadVector { step: k + 1, values })
}

/// Loads of every step, `loads[k - 1]` for the interval `(t_{k-1}, t_k]`,
/// and the matching `∫_Ω (f^k)²`.
pub fn time_averaged_loads(
    f: &(dyn Fn(&[f64], f64) -> f64 + Send + Sync),
    grid: &TimeGrid,
    omega: &OmegaMesh,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut loads = Vec::with_capacity(grid.steps);
    let mut squares = Vec::with_capacity(grid.steps);
    for k in 0..grid.steps {
        let (l, sq) = averaged_load(f, k, grid, omega)?;
        loads.push(l);
        squares.push(sq);
    }
    Ok((loads, squares))
}

/// Load of step `k` together with `∫_Ω (f^{k+1})²`.
pub(crate) fn averaged_load(
    f: &(dyn Fn(&[f64], f64) -> f64 + Send + Sync),
    k: usize,
    grid: &TimeGrid,
    omega: &OmegaMesh,
) -> Result<(Vec<f64>, f64)> {
    let dim = omega.dim();
    let vpc = omega.vertices_per_cell();
    let vol = omega.cell_volume();
    let rule = cell_rule(dim);
    let t0 = grid.node(k);
    let t1 = grid.node(k + 1);
    let mut values = vec![0.0; omega.n_vertices()];
    let mut square = 0.0;
    for c in 0..omega.n_cells() {
        let verts = omega.cell_vertices(c);
        for &(reference, w) in &rule {
            let x = omega.map_to_cell(c, reference);
            let x = &x[..dim];
            let mut avg = 0.0;
            for &(xi, wt) in &GAUSS2 {
                let t = t0 + (t1 - t0) * xi;
                avg += wt * checked(f(x, t), x, t)?;
            }
            let shape = omega.shape_values(reference);
            for a in 0..vpc {
                values[verts[a]] += w * vol * avg * shape[a];
            }
            square += w * vol * avg * avg;
        }
    }
    Ok((values, square))
}
