//! Piecewise-constant controls, the reduced cost and its adjoint gradient.

use crate::assembly::time_averaged_loads;
use crate::evolution::{check_control, AdjointTrajectory, Evolution, StateTrajectory};
use crate::mesh::{CylinderMesh, OmegaMesh};
use crate::optimize::{BoxObjective, BfgsOptions, OptimizeResult};
use crate::problem::{checked, ControlBounds, FractionalParams, ProblemData, TimeGrid};
use crate::quadrature::{cell_rule, GAUSS2};
use crate::{Error, Result};

pub use crate::optimize::projected_bfgs;

/// Control that is constant on every `(t_{k-1}, t_k] × K`.
///
/// Values are stored step-major: entry `(k - 1) * cells + c` belongs to
/// step `k ∈ 1..=K` and cell `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField {
    omega: OmegaMesh,
    grid: TimeGrid,
    bounds: ControlBounds,
    values: Vec<f64>,
}

impl ControlField {
    pub fn zeros(omega: OmegaMesh, grid: TimeGrid, bounds: ControlBounds) -> Self {
        Self::constant(omega, grid, bounds, 0.0)
    }

    pub fn constant(omega: OmegaMesh, grid: TimeGrid, bounds: ControlBounds, value: f64) -> Self {
        let n = omega.n_cells() * grid.steps;
        Self {
            omega,
            grid,
            bounds,
            values: vec![value; n],
        }
    }

    pub fn from_values(omega: OmegaMesh, grid: TimeGrid, bounds: ControlBounds, values: Vec<f64>) -> Result<Self> {
        if values.len() != omega.n_cells() * grid.steps {
            return Err(Error::DimensionMismatch(format!(
                "{} control values for {} steps x {} cells",
                values.len(),
                grid.steps,
                omega.n_cells()
            )));
        }
        Ok(Self {
            omega,
            grid,
            bounds,
            values,
        })
    }

    pub fn omega(&self) -> &OmegaMesh {
        &self.omega
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn cells(&self) -> usize {
        self.omega.n_cells()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Values of step `k ∈ 1..=K`.
    pub fn step(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.values[(k - 1) * n..k * n]
    }

    /// Weight `τ |K|` of every entry in the `ℓ²(L²)` inner product.
    pub fn weight(&self) -> f64 {
        self.grid.tau * self.omega.cell_volume()
    }

    pub fn inner(&self, other: &ControlField) -> f64 {
        self.weight() * dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn is_admissible(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v >= self.bounds.lower && v <= self.bounds.upper)
    }

    /// Copy clamped entrywise into the bounds.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        let (a, b) = (self.bounds.lower, self.bounds.upper);
        out.values.iter_mut().for_each(|v| *v = v.clamp(a, b));
        out
    }

    /// Add `⟨Z^k, φ_v⟩` to the vertex vector `out`.
    pub fn add_load(&self, k: usize, out: &mut [f64]) {
        let share = self.omega.cell_volume() / self.omega.vertices_per_cell() as f64;
        let vpc = self.omega.vertices_per_cell();
        for (c, &z) in self.step(k).iter().enumerate() {
            let verts = self.omega.cell_vertices(c);
            for &v in &verts[..vpc] {
                out[v] += share * z;
            }
        }
    }

    /// `Σ_k τ (Z^k, tr^k)_{L²(Ω)}` for vertex traces `traces[k - 1]`.
    pub fn pair_with_traces(&self, traces: &[Vec<f64>]) -> f64 {
        let means = cell_means_history(&self.omega, traces);
        self.weight() * dot(&self.values, &means)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entrywise `max(a, min(b, v))`.
pub fn clamp(values: &[f64], lower: f64, upper: f64) -> Result<Vec<f64>> {
    if lower > upper {
        return Err(Error::Bounds { lower, upper });
    }
    Ok(values.iter().map(|v| v.clamp(lower, upper)).collect())
}

/// Cell averages of a Q1 vertex function, which equal the vertex averages.
pub fn cell_means(omega: &OmegaMesh, trace: &[f64]) -> Vec<f64> {
    let vpc = omega.vertices_per_cell();
    (0..omega.n_cells())
        .map(|c| {
            let verts = omega.cell_vertices(c);
            verts[..vpc].iter().map(|&v| trace[v]).sum::<f64>() / vpc as f64
        })
        .collect()
}

/// Step-major cell means of `traces[k - 1]`, `k = 1..=K`.
pub fn cell_means_history(omega: &OmegaMesh, traces: &[Vec<f64>]) -> Vec<f64> {
    traces.iter().flat_map(|t| cell_means(omega, t)).collect()
}

/// `L²(Q)` projection of `r` onto controls that are constant per cell and step.
pub fn l2_project(
    r: &(dyn Fn(&[f64], f64) -> f64 + Send + Sync),
    grid: &TimeGrid,
    omega: &OmegaMesh,
    bounds: ControlBounds,
) -> Result<ControlField> {
    let dim = omega.dim();
    let rule = cell_rule(dim);
    let mut values = Vec::with_capacity(grid.steps * omega.n_cells());
    for k in 1..=grid.steps {
        let (t0, t1) = (grid.node(k - 1), grid.node(k));
        for c in 0..omega.n_cells() {
            let mut mean = 0.0;
            for &(reference, w) in &rule {
                let x = omega.map_to_cell(c, reference);
                let x = &x[..dim];
                for &(xi, wt) in &GAUSS2 {
                    let t = t0 + (t1 - t0) * xi;
                    mean += w * wt * checked(r(x, t), x, t)?;
                }
            }
            values.push(mean);
        }
    }
    ControlField::from_values(omega.clone(), *grid, bounds, values)
}

/// Cell means of the adjoint paired with each control step: step `k`
/// sees `Π tr P^{k-1}`.
pub fn adjoint_means(omega: &OmegaMesh, adjoint: &AdjointTrajectory) -> Vec<f64> {
    let k_max = adjoint.grid.steps;
    cell_means_history(omega, &adjoint.traces[..k_max])
}

/// `‖Z − clamp(−Π tr P / μ)‖_{ℓ²(L²)}`; zero exactly when the discrete
/// variational inequality holds.
pub fn vi_residual(z: &ControlField, adjoint_means: &[f64]) -> f64 {
    let b = z.bounds();
    let sum: f64 = z
        .values()
        .iter()
        .zip(adjoint_means)
        .map(|(&zv, &p)| {
            let fixed = (-p / b.mu).clamp(b.lower, b.upper);
            (zv - fixed).powi(2)
        })
        .sum();
    (z.weight() * sum).sqrt()
}

/// Cost, gradient and the trajectories they came from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: f64,
    /// Riesz representative of the derivative in the `ℓ²(L²)` inner product.
    pub gradient: Vec<f64>,
    pub state: StateTrajectory,
    pub adjoint: AdjointTrajectory,
}

/// Control-to-cost map with the state eliminated, on one discretization.
#[derive(Debug)]
pub struct ReducedProblem {
    evo: Evolution,
    data: ProblemData,
    initial: Vec<f64>,
    forcing: Vec<Vec<f64>>,
    desired: Vec<Vec<f64>>,
    desired_sq: Vec<f64>,
}

impl ReducedProblem {
    pub fn new(data: ProblemData, params: FractionalParams, mesh: CylinderMesh, grid: TimeGrid) -> Result<Self> {
        if data.dim != mesh.omega().dim() {
            return Err(Error::DimensionMismatch(format!(
                "data in dimension {} on a mesh of dimension {}",
                data.dim,
                mesh.omega().dim()
            )));
        }
        let evo = Evolution::new(mesh, params, grid, data.reaction)?;
        let omega = evo.mesh().omega().clone();
        let (forcing, _) = time_averaged_loads(data.forcing.as_ref(), &grid, &omega)?;
        let (desired, desired_sq) = time_averaged_loads(data.desired.as_ref(), &grid, &omega)?;
        let initial = evo.initial_trace(data.initial.as_ref())?;
        Ok(Self {
            evo,
            data,
            initial,
            forcing,
            desired,
            desired_sq,
        })
    }

    pub fn evolution(&self) -> &Evolution {
        &self.evo
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    pub fn omega(&self) -> &OmegaMesh {
        self.evo.mesh().omega()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.evo.grid()
    }

    pub fn bounds(&self) -> ControlBounds {
        self.data.bounds
    }

    pub fn zero_control(&self) -> ControlField {
        ControlField::zeros(self.omega().clone(), *self.grid(), self.bounds())
    }

    pub fn state(&self, z: &ControlField) -> Result<StateTrajectory> {
        check_control(z, self.evo.mesh(), self.grid())?;
        self.evo.state(
            &self.initial,
            &mut |k, out| {
                out.copy_from_slice(&self.forcing[k - 1]);
                z.add_load(k, out);
                Ok(())
            },
            false,
        )
    }

    /// State response to `δ` with zero initial datum and zero forcing.
    pub fn homogeneous_state(&self, delta: &ControlField) -> Result<StateTrajectory> {
        check_control(delta, self.evo.mesh(), self.grid())?;
        let zero = vec![0.0; self.evo.n_vertices()];
        self.evo.state(
            &zero,
            &mut |k, out| {
                delta.add_load(k, out);
                Ok(())
            },
            false,
        )
    }

    pub fn adjoint(&self, state: &StateTrajectory) -> Result<AdjointTrajectory> {
        self.evo.tracking_adjoint(state, &self.desired)
    }

    /// `½ Σ_k τ ‖tr V^k − u_d^k‖² + (μ/2) ‖Z‖²` from the assembled moments.
    pub fn cost_of_state(&self, state: &StateTrajectory, z: &ControlField) -> f64 {
        let tau = self.grid().tau;
        let mass = self.evo.mass();
        let tracking: f64 = (1..=self.grid().steps)
            .map(|k| {
                let v = &state.traces[k];
                tau * (mass.bilinear(v, v) - 2.0 * dot(v, &self.desired[k - 1]) + self.desired_sq[k - 1])
            })
            .sum();
        0.5 * tracking + 0.5 * self.bounds().mu * z.inner(z)
    }

    pub fn reduced_cost(&self, z: &ControlField) -> Result<f64> {
        let state = self.state(z)?;
        Ok(self.cost_of_state(&state, z))
    }

    /// Same cost evaluated pointwise: the trace interpolant and the
    /// time-averaged target are compared at every Gauss point.
    pub fn reduced_cost_by_quadrature(&self, z: &ControlField) -> Result<f64> {
        let state = self.state(z)?;
        let omega = self.omega();
        let grid = self.grid();
        let dim = omega.dim();
        let vpc = omega.vertices_per_cell();
        let vol = omega.cell_volume();
        let rule = cell_rule(dim);
        let mut tracking = 0.0;
        for k in 1..=grid.steps {
            let (t0, t1) = (grid.node(k - 1), grid.node(k));
            let trace = &state.traces[k];
            for c in 0..omega.n_cells() {
                let verts = omega.cell_vertices(c);
                for &(reference, w) in &rule {
                    let x = omega.map_to_cell(c, reference);
                    let x = &x[..dim];
                    let shape = omega.shape_values(reference);
                    let v: f64 = (0..vpc).map(|a| shape[a] * trace[verts[a]]).sum();
                    let target: f64 = GAUSS2
                        .iter()
                        .map(|&(xi, wt)| wt * (self.data.desired)(x, t0 + (t1 - t0) * xi))
                        .sum();
                    tracking += grid.tau * w * vol * (v - target).powi(2);
                }
            }
        }
        let reg: f64 = z.values().iter().map(|v| v * v).sum::<f64>() * z.weight();
        Ok(0.5 * tracking + 0.5 * self.bounds().mu * reg)
    }

    /// `μ Z + Π tr P(Z)` with `P` the discrete adjoint.
    pub fn reduced_gradient(&self, z: &ControlField) -> Result<Vec<f64>> {
        Ok(self.evaluate(z)?.gradient)
    }

    pub fn evaluate(&self, z: &ControlField) -> Result<Evaluation> {
        let state = self.state(z)?;
        let adjoint = self.adjoint(&state)?;
        let cost = self.cost_of_state(&state, z);
        let means = adjoint_means(self.omega(), &adjoint);
        let mu = self.bounds().mu;
        let gradient = z.values().iter().zip(&means).map(|(zv, p)| mu * zv + p).collect();
        Ok(Evaluation {
            cost,
            gradient,
            state,
            adjoint,
        })
    }

    /// `J(Z + δ) − J(Z)` given the state of `Z`, computed through the
    /// homogeneous response to `δ` so that small differences keep their
    /// relative accuracy.
    pub fn cost_change(&self, z: &ControlField, state: &StateTrajectory, delta: &ControlField) -> Result<f64> {
        let w = self.homogeneous_state(delta)?;
        let tau = self.grid().tau;
        let mass = self.evo.mass();
        let mut change = 0.0;
        for k in 1..=self.grid().steps {
            let wk = &w.traces[k];
            let mv = mass.mul(wk);
            let cross = dot(&mv, &state.traces[k]) - dot(wk, &self.desired[k - 1]);
            change += tau * (cross + 0.5 * dot(&mv, wk));
        }
        let mu = self.bounds().mu;
        Ok(change + mu * z.inner(delta) + 0.5 * mu * delta.inner(delta))
    }
}

/// [`ReducedProblem`] seen as a box-constrained objective over the raw
/// step-major values; keeps the state of the last evaluated point.
pub struct ReducedObjective<'a> {
    problem: &'a ReducedProblem,
    template: ControlField,
    last: Option<(Vec<f64>, StateTrajectory)>,
}

impl<'a> ReducedObjective<'a> {
    pub fn new(problem: &'a ReducedProblem) -> Self {
        Self {
            problem,
            template: problem.zero_control(),
            last: None,
        }
    }

    fn field(&self, x: &[f64]) -> ControlField {
        let mut f = self.template.clone();
        f.values_mut().copy_from_slice(x);
        f
    }
}

impl BoxObjective for ReducedObjective<'_> {
    fn dim(&self) -> usize {
        self.template.values().len()
    }

    fn weight(&self) -> f64 {
        self.template.weight()
    }

    fn bounds(&self) -> (f64, f64) {
        let b = self.problem.bounds();
        (b.lower, b.upper)
    }

    fn curvature_seed(&self) -> f64 {
        self.problem.bounds().mu
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let z = self.field(x);
        let ev = self.problem.evaluate(&z)?;
        self.last = Some((x.to_vec(), ev.state));
        Ok((ev.cost, ev.gradient))
    }

    fn cost_change(&mut self, x: &[f64], step: &[f64]) -> Result<Option<f64>> {
        let z = self.field(x);
        let state = match &self.last {
            Some((at, state)) if at.as_slice() == x => state.clone(),
            _ => self.problem.state(&z)?,
        };
        let delta = self.field(step);
        self.problem.cost_change(&z, &state, &delta).map(Some)
    }
}

/// Optimal control with its optimality data.
#[derive(Clone, Debug)]
pub struct ControlSolution {
    pub control: ControlField,
    pub cost: f64,
    pub pg_history: Vec<f64>,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub state: StateTrajectory,
    pub adjoint: AdjointTrajectory,
}

impl ControlSolution {
    pub fn pg_norm(&self) -> f64 {
        self.pg_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Minimize the reduced cost over admissible controls from `initial`.
pub fn solve_control(problem: &ReducedProblem, initial: &ControlField, options: &BfgsOptions) -> Result<ControlSolution> {
    let mut objective = ReducedObjective::new(problem);
    let result: OptimizeResult = projected_bfgs(&mut objective, initial.values(), options)?;
    let control = objective.field(&result.x);
    let ev = problem.evaluate(&control)?;
    Ok(ControlSolution {
        control,
        cost: ev.cost,
        pg_history: result.pg_history,
        cost_history: result.cost_history,
        iterations: result.iterations,
        converged: result.converged,
        state: ev.state,
        adjoint: ev.adjoint,
    })
}
