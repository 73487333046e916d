//! Time discretization: L1 weights, discrete extension of the initial
//! datum, and the forward state and backward adjoint marches.
//!
//! Every step solves `(c M + A) V^{k+1} = M h^{k} + F^{k+1}` where `A` is the
//! weighted stiffness on the free cylinder nodes, `M` the trace mass and
//! `c`, `h^k` come from the discrete time derivative. Only traces enter
//! `h^k`, so the history kept is one Ω vector per step.

use statrs::function::gamma::gamma as gamma_fn;

use crate::assembly::{assemble_stiffness, assemble_trace_mass, omega_mass, time_averaged_loads, SparseOperator};
use crate::control::ControlField;
use crate::linalg::CholeskySolver;
use crate::mesh::CylinderMesh;
use crate::problem::{checked, FractionalParams, ProblemData, TimeGrid};
use crate::{Error, Result};

/// Weights `a_j = (j+1)^{1-γ} - j^{1-γ}` of the L1 scheme and the factor
/// `1 / (Γ(2-γ) τ^γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaputoWeights {
    pub gamma: f64,
    /// `a_0, …, a_K`
    pub a: Vec<f64>,
    pub scale: f64,
}

/// L1 weights for `K` steps of size `tau`; `gamma` must lie in (0, 1).
pub fn caputo_weights(gamma: f64, steps: usize, tau: f64) -> Result<CaputoWeights> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::UseDelta1(gamma));
    }
    if !(tau > 0.0) {
        return Err(Error::ParameterDomain(format!("time step {tau}")));
    }
    let e = 1.0 - gamma;
    // j^{e} ((1 + 1/j)^{e} - 1) avoids cancelling two nearly equal powers
    let a = (0..=steps)
        .map(|j| {
            if j == 0 {
                1.0
            } else {
                let jf = j as f64;
                jf.powf(e) * (e * (1.0 / jf).ln_1p()).exp_m1()
            }
        })
        .collect();
    Ok(CaputoWeights {
        gamma,
        a,
        scale: 1.0 / (gamma_fn(2.0 - gamma) * tau.powf(gamma)),
    })
}

/// Split `δ^γ φ^{k+1} = c_new φ^{k+1} - h_known` for the scalar history
/// `φ^0, …, φ^k`.
pub fn apply_discrete_caputo(weights: &CaputoWeights, history: &[f64]) -> Result<(f64, f64)> {
    let Some(k) = history.len().checked_sub(1) else {
        return Err(Error::EmptyHistory);
    };
    if k + 1 >= weights.a.len() {
        return Err(Error::DimensionMismatch(format!(
            "history of {} values for {} weights",
            history.len(),
            weights.a.len()
        )));
    }
    Ok((weights.scale, weights.scale * l1_known(&weights.a, history)))
}

/// `Σ_{j<k} (a_j − a_{j+1}) φ^{k−j} + a_k φ^0`, summed in the telescoped
/// form `φ^k − Σ_{j=1}^{k} a_j (φ^{k+1−j} − φ^{k−j})` whose terms are small
/// for smooth histories.
pub(crate) fn l1_known(a: &[f64], history: &[f64]) -> f64 {
    let k = history.len() - 1;
    let mut h = 0.0;
    for j in 1..=k {
        h += a[j] * (history[k + 1 - j] - history[k - j]);
    }
    history[k] - h
}

/// Discrete time derivative used by the marches.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeStencil {
    /// `(φ^{k+1} - φ^k) / τ`
    BackwardEuler { tau: f64 },
    L1(CaputoWeights),
}

impl TimeStencil {
    pub fn new(gamma: f64, grid: &TimeGrid) -> Result<Self> {
        if gamma == 1.0 {
            Ok(Self::BackwardEuler { tau: grid.tau })
        } else {
            Ok(Self::L1(caputo_weights(gamma, grid.steps, grid.tau)?))
        }
    }

    /// Coefficient of the new value.
    pub fn coefficient(&self) -> f64 {
        match self {
            Self::BackwardEuler { tau } => 1.0 / tau,
            Self::L1(w) => w.scale,
        }
    }

    /// Known part `h_known` for the step after `history = [φ^0, …, φ^k]`.
    pub fn history_term(&self, history: &[Vec<f64>], out: &mut [f64]) {
        let k = history.len() - 1;
        match self {
            Self::BackwardEuler { tau } => {
                for (o, v) in out.iter_mut().zip(&history[k]) {
                    *o = v / tau;
                }
            }
            Self::L1(w) => {
                let a = &w.a;
                out.iter_mut().for_each(|o| *o = 0.0);
                for j in 1..=k {
                    let (newer, older) = (&history[k + 1 - j], &history[k - j]);
                    for ((o, n), p) in out.iter_mut().zip(newer).zip(older) {
                        *o += a[j] * (n - p);
                    }
                }
                for (o, v) in out.iter_mut().zip(&history[k]) {
                    *o = w.scale * (v - *o);
                }
            }
        }
    }
}

/// Traces of the discrete state at `t_0, …, t_K`, one value per Ω vertex.
#[derive(Clone, Debug)]
pub struct StateTrajectory {
    pub grid: TimeGrid,
    pub traces: Vec<Vec<f64>>,
    /// Free-node cylinder coefficients per step, when requested.
    pub fields: Option<Vec<Vec<f64>>>,
}

/// Traces of the discrete adjoint `P^0, …, P^K`; `P^K = 0`.
#[derive(Clone, Debug)]
pub struct AdjointTrajectory {
    pub grid: TimeGrid,
    pub traces: Vec<Vec<f64>>,
}

/// Free-node cylinder coefficients per time step.
pub type Fields = Vec<Vec<f64>>;

/// Operators of one discretization, factorized once.
#[derive(Debug)]
pub struct Evolution {
    mesh: CylinderMesh,
    params: FractionalParams,
    grid: TimeGrid,
    stiffness: SparseOperator,
    mass: SparseOperator,
    stencil: TimeStencil,
    solver: CholeskySolver,
    trace_free: Vec<Option<usize>>,
}

impl Evolution {
    pub fn new(mesh: CylinderMesh, params: FractionalParams, grid: TimeGrid, reaction: f64) -> Result<Self> {
        let stiffness = assemble_stiffness(&mesh, &params, reaction)?;
        let stencil = TimeStencil::new(params.gamma, &grid)?;
        let free_map: Vec<Option<usize>> = (0..mesh.n_nodes()).map(|i| mesh.free_index(i)).collect();
        let trace_mass = assemble_trace_mass(&mesh).restrict(&free_map, mesh.n_free());
        let system = stiffness.add_scaled(&trace_mass, stencil.coefficient());
        let solver = CholeskySolver::factorize(&system)?;
        let mass = omega_mass(mesh.omega());
        let trace_free = mesh.trace_free_indices();
        Ok(Self {
            mesh,
            params,
            grid,
            stiffness,
            mass,
            stencil,
            solver,
            trace_free,
        })
    }

    pub fn mesh(&self) -> &CylinderMesh {
        &self.mesh
    }

    pub fn params(&self) -> &FractionalParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.stiffness
    }

    /// Q1 mass on Ω, indexed by vertex.
    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn stencil(&self) -> &TimeStencil {
        &self.stencil
    }

    pub fn n_vertices(&self) -> usize {
        self.mesh.omega().n_vertices()
    }

    /// Nodal values of `u0` on Ω, zero on ∂Ω.
    pub fn initial_trace(&self, u0: &(dyn Fn(&[f64]) -> f64 + Send + Sync)) -> Result<Vec<f64>> {
        let omega = self.mesh.omega();
        (0..omega.n_vertices())
            .map(|v| {
                if omega.is_boundary_vertex(v) {
                    Ok(0.0)
                } else {
                    let x = omega.vertex_point(v);
                    checked(u0(&x), &x, 0.0)
                }
            })
            .collect()
    }

    /// Discrete extension of the initial datum; see [`initialize_state`].
    pub fn initialize_state(&self, u0: &(dyn Fn(&[f64]) -> f64 + Send + Sync)) -> Result<Vec<f64>> {
        let trace = self.initial_trace(u0)?;
        extend_trace(&self.mesh, &self.stiffness, &trace)
    }

    /// March `K` steps from `initial_trace`. `load(k, out)` adds the load
    /// of step `k ∈ 1..=K` to the zeroed vertex vector `out`.
    pub fn march(
        &self,
        initial_trace: &[f64],
        load: &mut dyn FnMut(usize, &mut [f64]) -> Result<()>,
        keep_fields: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<Fields>)> {
        let nv = self.n_vertices();
        if initial_trace.len() != nv {
            return Err(Error::DimensionMismatch(format!(
                "initial trace of length {} on {nv} vertices",
                initial_trace.len()
            )));
        }
        let k_max = self.grid.steps;
        let mut traces = Vec::with_capacity(k_max + 1);
        traces.push(initial_trace.to_vec());
        let mut fields = if keep_fields {
            Some(vec![extend_trace(&self.mesh, &self.stiffness, initial_trace)?])
        } else {
            None
        };
        let mut known = vec![0.0; nv];
        let mut rhs_trace = vec![0.0; nv];
        let mut rhs = vec![0.0; self.mesh.n_free()];
        for k in 1..=k_max {
            self.stencil.history_term(&traces, &mut known);
            self.mass.apply(&known, &mut rhs_trace);
            let mut f = vec![0.0; nv];
            load(k, &mut f)?;
            rhs.iter_mut().for_each(|r| *r = 0.0);
            for (v, idx) in self.trace_free.iter().enumerate() {
                if let Some(i) = *idx {
                    rhs[i] = rhs_trace[v] + f[v];
                }
            }
            self.solver.solve_in_place(&mut rhs);
            traces.push(self.mesh.trace_of(&rhs));
            if let Some(fields) = fields.as_mut() {
                fields.push(rhs.clone());
            }
        }
        Ok((traces, fields))
    }

    /// State march from `initial_trace` with precomputed loads.
    pub fn state(
        &self,
        initial_trace: &[f64],
        load: &mut dyn FnMut(usize, &mut [f64]) -> Result<()>,
        keep_fields: bool,
    ) -> Result<StateTrajectory> {
        let (traces, fields) = self.march(initial_trace, load, keep_fields)?;
        Ok(StateTrajectory {
            grid: self.grid,
            traces,
            fields,
        })
    }

    /// Adjoint of the state march: `data(k, out)` adds the load paired with
    /// step `k ∈ 1..=K` of the state, and `P^{k-1}` is the response to it.
    ///
    /// The state system is block lower-triangular Toeplitz in time with
    /// symmetric blocks, so its transpose is the same march run on the
    /// time-reversed data from a zero initial value.
    pub fn adjoint(&self, data: &mut dyn FnMut(usize, &mut [f64]) -> Result<()>) -> Result<AdjointTrajectory> {
        let k_max = self.grid.steps;
        let zero = vec![0.0; self.n_vertices()];
        let (reversed, _) = self.march(&zero, &mut |j, out| data(k_max + 1 - j, out), false)?;
        // reversed[j] = P^{K-j}
        let traces = reversed.into_iter().rev().collect();
        Ok(AdjointTrajectory {
            grid: self.grid,
            traces,
        })
    }

    /// Adjoint driven by the tracking residual `M tr V^k - ⟨u_d^k, φ⟩`.
    pub fn tracking_adjoint(&self, state: &StateTrajectory, desired_loads: &[Vec<f64>]) -> Result<AdjointTrajectory> {
        if state.traces.len() != self.grid.steps + 1 || desired_loads.len() != self.grid.steps {
            return Err(Error::DimensionMismatch("trajectory length".into()));
        }
        self.adjoint(&mut |k, out| {
            self.mass.apply(&state.traces[k], out);
            for (o, d) in out.iter_mut().zip(&desired_loads[k - 1]) {
                *o -= d;
            }
            Ok(())
        })
    }

    /// `‖v‖²_{L²(Ω)}` of a trace vector.
    pub fn trace_norm_sq(&self, trace: &[f64]) -> f64 {
        self.mass.bilinear(trace, trace)
    }
}

/// Solve `a_Y(V, W) = 0` for every `W` vanishing on Ω × {0}, with `V`
/// prescribed on the trace. Returns free-node coefficients.
pub fn extend_trace(mesh: &CylinderMesh, stiffness: &SparseOperator, trace: &[f64]) -> Result<Vec<f64>> {
    let n = mesh.n_free();
    if stiffness.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "stiffness of size {} for {n} free nodes",
            stiffness.dim()
        )));
    }
    let mut on_trace = vec![false; n];
    let mut values = vec![0.0; n];
    for (v, idx) in mesh.trace_free_indices().into_iter().enumerate() {
        if let Some(i) = idx {
            on_trace[i] = true;
            values[i] = trace[v];
        }
    }
    let mut interior = vec![None; n];
    let mut count = 0;
    for i in 0..n {
        if !on_trace[i] {
            interior[i] = Some(count);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(values);
    }
    let a_ii = stiffness.restrict(&interior, count);
    let mut rhs = vec![0.0; count];
    for (i, j, v) in stiffness.entries() {
        if let (Some(r), true) = (interior[i], on_trace[j]) {
            rhs[r] -= v * values[j];
        }
    }
    CholeskySolver::factorize(&a_ii)?.solve_in_place(&mut rhs);
    for i in 0..n {
        if let Some(r) = interior[i] {
            values[i] = rhs[r];
        }
    }
    Ok(values)
}

/// Discrete weighted-harmonic extension of `u0` (nodal on Ω × {0}, zero on
/// the Dirichlet part), as free-node coefficients.
pub fn initialize_state(
    u0: &(dyn Fn(&[f64]) -> f64 + Send + Sync),
    mesh: &CylinderMesh,
    stiffness: &SparseOperator,
) -> Result<Vec<f64>> {
    let omega = mesh.omega();
    let trace = (0..omega.n_vertices())
        .map(|v| {
            if omega.is_boundary_vertex(v) {
                Ok(0.0)
            } else {
                let x = omega.vertex_point(v);
                checked(u0(&x), &x, 0.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    extend_trace(mesh, stiffness, &trace)
}

/// Forward state solve for the data of `data` and a fixed control.
pub fn solve_state(
    data: &ProblemData,
    params: &FractionalParams,
    mesh: &CylinderMesh,
    grid: &TimeGrid,
    control: &ControlField,
) -> Result<StateTrajectory> {
    check_control(control, mesh, grid)?;
    let evo = Evolution::new(mesh.clone(), *params, *grid, data.reaction)?;
    let (loads, _) = time_averaged_loads(data.forcing.as_ref(), grid, mesh.omega())?;
    let u0 = evo.initial_trace(data.initial.as_ref())?;
    evo.state(
        &u0,
        &mut |k, out| {
            out.copy_from_slice(&loads[k - 1]);
            control.add_load(k, out);
            Ok(())
        },
        false,
    )
}

/// Backward adjoint solve for the tracking functional with target `data.desired`.
pub fn solve_adjoint(
    state: &StateTrajectory,
    data: &ProblemData,
    params: &FractionalParams,
    mesh: &CylinderMesh,
    grid: &TimeGrid,
) -> Result<AdjointTrajectory> {
    let evo = Evolution::new(mesh.clone(), *params, *grid, data.reaction)?;
    let (desired, _) = time_averaged_loads(data.desired.as_ref(), grid, mesh.omega())?;
    evo.tracking_adjoint(state, &desired)
}

pub(crate) fn check_control(control: &ControlField, mesh: &CylinderMesh, grid: &TimeGrid) -> Result<()> {
    if control.steps() != grid.steps || control.cells() != mesh.omega().n_cells() {
        return Err(Error::DimensionMismatch(format!(
            "control with {} steps x {} cells for {} steps x {} cells",
            control.steps(),
            control.cells(),
            grid.steps,
            mesh.omega().n_cells()
        )));
    }
    Ok(())
}

/// Discrete `Λ_γ²`: `I^{1-γ}` of the piecewise-constant history
/// `‖v^k‖²` on `(t_{k-1}, t_k]`, evaluated at `T`, plus `Σ τ ‖g^k‖²`.
///
/// `norms_sq[k]` is `‖v^k‖²` for `k = 0..=K`; `forcing_norms[k-1]` is `‖g^k‖`.
pub fn lambda_diagnostic(norms_sq: &[f64], gamma: f64, grid: &TimeGrid, forcing_norms: &[f64]) -> f64 {
    let k_max = grid.steps;
    let forcing: f64 = forcing_norms.iter().map(|g| grid.tau * g * g).sum();
    let memory = if gamma == 1.0 {
        norms_sq[k_max]
    } else {
        let e = 1.0 - gamma;
        let t = grid.final_time;
        let acc: f64 = (1..=k_max)
            .zip(&norms_sq[1..])
            .map(|(k, n)| {
                let left = (t - grid.node(k - 1)).max(0.0).powf(e);
                let right = (t - grid.node(k)).max(0.0).powf(e);
                n * (left - right)
            })
            .sum();
        acc / gamma_fn(2.0 - gamma)
    };
    memory + forcing
}
