//! Uniform partitions of Ω = (0,1)^n, graded partitions of the extended
//! axis and their tensor-product cylinder mesh.
//!
//! Node numbering in the cylinder is axis-major within each Ω vertex:
//! node `(v, m)` has global index `v * (M + 1) + m`, where `v` is the
//! lexicographic index of the Ω vertex and `m` the axis node. Ω vertices
//! and cells are numbered with the first coordinate running fastest.

use crate::{Error, Result};

/// Uniform lattice mesh of (0,1)^n, n ∈ {1, 2}, into intervals or squares.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaMesh {
    dim: usize,
    cells_per_dim: usize,
    h: f64,
}

impl OmegaMesh {
    pub fn unit(dim: usize, cells_per_dim: usize) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::ParameterDomain(format!("dimension {dim} not in {{1,2}}")));
        }
        if cells_per_dim == 0 {
            return Err(Error::EmptyMesh);
        }
        Ok(Self {
            dim,
            cells_per_dim,
            h: 1.0 / cells_per_dim as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_dim(&self) -> usize {
        self.cells_per_dim
    }

    /// Mesh size `1 / cells_per_dim`.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn vertices_per_dim(&self) -> usize {
        self.cells_per_dim + 1
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices_per_dim().pow(self.dim as u32)
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_dim.pow(self.dim as u32)
    }

    pub fn vertices_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    fn vertex_lattice(&self, v: usize) -> [usize; 2] {
        let nv = self.vertices_per_dim();
        match self.dim {
            1 => [v, 0],
            _ => [v % nv, v / nv],
        }
    }

    /// Coordinates of vertex `v`; the second entry is zero when `n = 1`.
    pub fn vertex_coords(&self, v: usize) -> [f64; 2] {
        let [i, j] = self.vertex_lattice(v);
        match self.dim {
            1 => [i as f64 * self.h, 0.0],
            _ => [i as f64 * self.h, j as f64 * self.h],
        }
    }

    /// The point of Ω at vertex `v` as a slice of length `dim`.
    pub fn vertex_point(&self, v: usize) -> Vec<f64> {
        self.vertex_coords(v)[..self.dim].to_vec()
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        let last = self.cells_per_dim;
        let [i, j] = self.vertex_lattice(v);
        let on = |k: usize| k == 0 || k == last;
        match self.dim {
            1 => on(i),
            _ => on(i) || on(j),
        }
    }

    pub fn boundary_vertex_mask(&self) -> Vec<bool> {
        (0..self.n_vertices()).map(|v| self.is_boundary_vertex(v)).collect()
    }

    /// Vertices of cell `c` in tensor order: local index `a + 2b` is the
    /// vertex offset by `a` in x'_1 and `b` in x'_2.
    pub fn cell_vertices(&self, c: usize) -> [usize; 4] {
        let n = self.cells_per_dim;
        let nv = self.vertices_per_dim();
        match self.dim {
            1 => [c, c + 1, usize::MAX, usize::MAX],
            _ => {
                let (i, j) = (c % n, c / n);
                let v = i + j * nv;
                [v, v + 1, v + nv, v + nv + 1]
            }
        }
    }

    /// Lower-left corner of cell `c`.
    pub fn cell_origin(&self, c: usize) -> [f64; 2] {
        let n = self.cells_per_dim;
        match self.dim {
            1 => [c as f64 * self.h, 0.0],
            _ => [(c % n) as f64 * self.h, (c / n) as f64 * self.h],
        }
    }

    /// Map reference coordinates in [0,1]^n to cell `c`.
    pub fn map_to_cell(&self, c: usize, reference: [f64; 2]) -> [f64; 2] {
        let o = self.cell_origin(c);
        match self.dim {
            1 => [o[0] + self.h * reference[0], 0.0],
            _ => [o[0] + self.h * reference[0], o[1] + self.h * reference[1]],
        }
    }

    /// Values of the Q1 (P1 for n = 1) shape functions of a cell at
    /// reference coordinates, in the local order of [`Self::cell_vertices`].
    pub fn shape_values(&self, reference: [f64; 2]) -> [f64; 4] {
        let [x, y] = reference;
        match self.dim {
            1 => [1.0 - x, x, 0.0, 0.0],
            _ => [
                (1.0 - x) * (1.0 - y),
                x * (1.0 - y),
                (1.0 - x) * y,
                x * y,
            ],
        }
    }
}

/// Partition `y_m = (m/M)^ζ Y` of the extended axis, optionally continued by
/// a uniform tail.
#[derive(Clone, Debug, PartialEq)]
pub struct GradedAxis {
    graded_intervals: usize,
    graded_height: f64,
    zeta: f64,
    nodes: Vec<f64>,
}

/// Graded partition of `[0, height]` into `intervals` pieces.
pub fn graded_axis(intervals: usize, height: f64, zeta: f64) -> Result<GradedAxis> {
    if intervals == 0 {
        return Err(Error::EmptyMesh);
    }
    if !(height > 0.0) || !height.is_finite() {
        return Err(Error::ParameterDomain(format!("axis height {height} <= 0")));
    }
    if !(zeta >= 1.0) || !zeta.is_finite() {
        return Err(Error::ParameterDomain(format!("grading exponent {zeta} < 1")));
    }
    let m = intervals as f64;
    let mut nodes: Vec<f64> = (0..=intervals)
        .map(|i| (i as f64 / m).powf(zeta) * height)
        .collect();
    nodes[intervals] = height;
    Ok(GradedAxis {
        graded_intervals: intervals,
        graded_height: height,
        zeta,
        nodes,
    })
}

/// Grading exponent `1.05 · 3/(1-α)`, strictly above the threshold `3/(1-α)`.
pub fn default_zeta(alpha: f64) -> f64 {
    1.05 * 3.0 / (1.0 - alpha)
}

impl GradedAxis {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Total number of intervals, graded part plus tail.
    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn graded_intervals(&self) -> usize {
        self.graded_intervals
    }

    pub fn height(&self) -> f64 {
        *self.nodes.last().expect("axis has nodes")
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.nodes[i], self.nodes[i + 1])
    }

    pub fn interval_lengths(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Extend the graded partition by uniform intervals of length `spacing`
    /// up to `height`. Axes built this way from the same graded part are
    /// nested: the shorter one is a prefix of the longer one.
    pub fn with_uniform_tail(&self, height: f64, spacing: f64) -> Result<GradedAxis> {
        if !(spacing > 0.0) {
            return Err(Error::ParameterDomain(format!("tail spacing {spacing} <= 0")));
        }
        let extra = height - self.graded_height;
        if extra < -1e-12 {
            return Err(Error::ParameterDomain(format!(
                "tail height {height} below graded height {}",
                self.graded_height
            )));
        }
        let count = (extra / spacing).round();
        if (count * spacing - extra).abs() > 1e-9 * height.max(1.0) {
            return Err(Error::ParameterDomain(format!(
                "height {height} is not the graded height plus a multiple of {spacing}"
            )));
        }
        let mut nodes = self.nodes[..=self.graded_intervals].to_vec();
        for i in 1..=count as usize {
            nodes.push(self.graded_height + i as f64 * spacing);
        }
        Ok(GradedAxis {
            graded_intervals: self.graded_intervals,
            graded_height: self.graded_height,
            zeta: self.zeta,
            nodes,
        })
    }
}

/// Tensor product `T_Ω × {I_m}` of the Ω mesh and the axis partition.
#[derive(Clone, Debug)]
pub struct CylinderMesh {
    omega: OmegaMesh,
    axis: GradedAxis,
    dirichlet: Vec<bool>,
    free_index: Vec<Option<usize>>,
    free_nodes: Vec<usize>,
}

/// Build the cylinder mesh and its Dirichlet mask on `∂_L C_Y ∪ Ω × {Y}`.
pub fn build_cylinder(omega: OmegaMesh, axis: GradedAxis) -> CylinderMesh {
    let per_column = axis.intervals() + 1;
    let n_nodes = omega.n_vertices() * per_column;
    let mut dirichlet = vec![false; n_nodes];
    for v in 0..omega.n_vertices() {
        let lateral = omega.is_boundary_vertex(v);
        for m in 0..per_column {
            dirichlet[v * per_column + m] = lateral || m == per_column - 1;
        }
    }
    let mut free_index = vec![None; n_nodes];
    let mut free_nodes = Vec::new();
    for (node, &d) in dirichlet.iter().enumerate() {
        if !d {
            free_index[node] = Some(free_nodes.len());
            free_nodes.push(node);
        }
    }
    CylinderMesh {
        omega,
        axis,
        dirichlet,
        free_index,
        free_nodes,
    }
}

impl CylinderMesh {
    pub fn omega(&self) -> &OmegaMesh {
        &self.omega
    }

    pub fn axis(&self) -> &GradedAxis {
        &self.axis
    }

    pub fn nodes_per_column(&self) -> usize {
        self.axis.intervals() + 1
    }

    pub fn node(&self, vertex: usize, axis_node: usize) -> usize {
        vertex * self.nodes_per_column() + axis_node
    }

    pub fn n_nodes(&self) -> usize {
        self.dirichlet.len()
    }

    /// Number of degrees of freedom `N` (interior and Neumann nodes).
    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet[node]
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        self.free_index[node]
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    /// Cylinder node on Ω × {0} above Ω vertex `v`.
    pub fn trace_node(&self, vertex: usize) -> usize {
        self.node(vertex, 0)
    }

    /// Free index of the trace node of each Ω vertex (`None` on ∂Ω).
    pub fn trace_free_indices(&self) -> Vec<Option<usize>> {
        (0..self.omega.n_vertices())
            .map(|v| self.free_index(self.trace_node(v)))
            .collect()
    }

    /// Scatter free-node coefficients into trace values per Ω vertex.
    pub fn trace_of(&self, free_values: &[f64]) -> Vec<f64> {
        (0..self.omega.n_vertices())
            .map(|v| {
                self.free_index(self.trace_node(v))
                    .map_or(0.0, |i| free_values[i])
            })
            .collect()
    }
}

/// Free-node count of the cylinder with `cells_per_dim` cells per direction
/// in Ω and `intervals` axis intervals, without building it.
pub fn free_node_count(dim: usize, cells_per_dim: usize, intervals: usize) -> usize {
    cells_per_dim.saturating_sub(1).pow(dim as u32) * intervals
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_axis() {
        let a = graded_axis(4, 1.0, 1.0).unwrap();
        assert_eq!(a.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn cubic_axis() {
        let a = graded_axis(2, 1.0, 3.0).unwrap();
        assert_eq!(a.nodes(), &[0.0, 0.125, 1.0]);
    }

    #[test]
    fn empty_axis_rejected() {
        assert!(matches!(graded_axis(0, 1.0, 2.0), Err(Error::EmptyMesh)));
    }

    #[test]
    fn zeta_defaults() {
        assert!((default_zeta(0.0) - 3.15).abs() < 1e-14);
        assert!((default_zeta(-0.6) - 1.968_75).abs() < 1e-14);
        assert!((default_zeta(0.5) - 6.3).abs() < 1e-14);
        for alpha in [-0.9, -0.3, 0.0, 0.4, 0.9] {
            assert!(default_zeta(alpha) > 3.0 / (1.0 - alpha));
        }
    }

    #[test]
    fn one_dimensional_cylinder_by_hand() {
        let omega = OmegaMesh::unit(1, 2).unwrap();
        let axis = graded_axis(2, 1.0, 3.0).unwrap();
        let mesh = build_cylinder(omega, axis);
        assert_eq!(mesh.n_nodes(), 9);
        assert_eq!(mesh.n_free(), 2);
        // interior vertex 1, axis nodes 0 and 1
        assert_eq!(mesh.free_nodes(), &[3, 4]);
        let dirichlet: usize = mesh.dirichlet_mask().iter().filter(|&&d| d).count();
        assert_eq!(dirichlet, 7);
        let traces = mesh.trace_free_indices();
        assert_eq!(traces, vec![None, Some(0), None]);
    }

    #[test]
    fn two_dimensional_dof_count() {
        for m in [2usize, 4, 7] {
            let omega = OmegaMesh::unit(2, m).unwrap();
            let axis = graded_axis(m, 1.0, 3.15).unwrap();
            let mesh = build_cylinder(omega, axis);
            assert_eq!(mesh.n_free(), (m - 1) * (m - 1) * m);
            assert_eq!(mesh.n_free(), free_node_count(2, m, m));
            assert_eq!(mesh.n_nodes(), (m + 1) * (m + 1) * (m + 1));
            // trace nodes are Dirichlet exactly over ∂Ω
            for v in 0..mesh.omega().n_vertices() {
                assert_eq!(
                    mesh.is_dirichlet(mesh.trace_node(v)),
                    mesh.omega().is_boundary_vertex(v)
                );
            }
        }
    }

    #[test]
    fn interior_vertices_touch_four_cells() {
        let omega = OmegaMesh::unit(2, 5).unwrap();
        let mut count = vec![0usize; omega.n_vertices()];
        for c in 0..omega.n_cells() {
            for &v in &omega.cell_vertices(c)[..4] {
                count[v] += 1;
            }
        }
        for v in 0..omega.n_vertices() {
            if !omega.is_boundary_vertex(v) {
                assert_eq!(count[v], 4);
            }
        }
    }

    #[test]
    fn nested_tails() {
        let base = graded_axis(4, 1.0, 3.15).unwrap();
        let short = base.with_uniform_tail(2.0, 0.25).unwrap();
        let long = base.with_uniform_tail(3.0, 0.25).unwrap();
        assert_eq!(&long.nodes()[..short.nodes().len()], short.nodes());
        assert!((long.height() - 3.0).abs() < 1e-14);
        assert!(base.with_uniform_tail(2.1, 0.25).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn axis_invariants(m in 1usize..200, y in 1.0f64..5.0, alpha in -0.95f64..0.6) {
                let zeta = default_zeta(alpha);
                let a = graded_axis(m, y, zeta).unwrap();
                let nodes = a.nodes();
                prop_assert_eq!(nodes[0], 0.0);
                prop_assert_eq!(nodes[m], y);
                prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
                let total: f64 = a.interval_lengths().iter().sum();
                prop_assert!((total - y).abs() <= 1e-12 * y);
                let sigma = 2f64.powf(zeta);
                let lens = a.interval_lengths();
                for w in lens.windows(2) {
                    prop_assert!(w[1] / w[0] <= sigma * (1.0 + 1e-12));
                    prop_assert!(w[0] / w[1] <= sigma * (1.0 + 1e-12));
                }
                // y_m(M) = y_{2m}(2M)
                let fine = graded_axis(2 * m, y, zeta).unwrap();
                for i in 0..=m {
                    prop_assert!((fine.nodes()[2 * i] - nodes[i]).abs() <= 1e-12 * y);
                }
            }
        }
    }
}
