//! Spectral reference solutions on the unit cube.
//!
//! Eigenpairs of the Dirichlet Laplacian on (0,1)^n are known in closed
//! form, so the state equation decouples into scalar problems
//! `∂_t^γ u_k + λ_k^s u_k = g_k` that are solved exactly (γ = 1,
//! exponential forcing) or by the scalar L1 scheme on a much finer grid.

use std::f64::consts::PI;
use std::sync::Arc;

use statrs::function::gamma::gamma as gamma_fn;

use crate::evolution::{caputo_weights, l1_known};
use crate::problem::{ControlBounds, ModalForcing, ModalTerm, ProblemData, SpaceTimeFn, SpectralData, TimeGrid};
use crate::problem::checked;
use crate::quadrature::{GAUSS2, GAUSS3};
use crate::{Error, Result};

/// Eigenfunction `sin(kπx₁)` or `sin(kπx₁) sin(lπx₂)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpectralMode {
    pub k: usize,
    pub l: Option<usize>,
}

impl SpectralMode {
    pub fn one(k: usize) -> Self {
        Self { k, l: None }
    }

    pub fn two(k: usize, l: usize) -> Self {
        Self { k, l: Some(l) }
    }

    pub fn dim(&self) -> usize {
        1 + usize::from(self.l.is_some())
    }

    pub fn eigenvalue(&self) -> f64 {
        let l = self.l.unwrap_or(0) as f64;
        PI * PI * ((self.k * self.k) as f64 + l * l)
    }

    /// Unnormalized product of sines.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = (self.k as f64 * PI * x[0]).sin();
        if let Some(l) = self.l {
            v *= (l as f64 * PI * x[1]).sin();
        }
        v
    }

    /// `L²(Ω)` norm of [`Self::eval`], `2^{-n/2}`.
    pub fn raw_norm(&self) -> f64 {
        0.5f64.powf(self.dim() as f64 / 2.0)
    }

    /// `L²(Ω)`-normalized eigenfunction.
    pub fn eval_normalized(&self, x: &[f64]) -> f64 {
        self.eval(x) / self.raw_norm()
    }
}

/// Largest mode index kept per dimension by [`sine_expansion`].
pub const MAX_MODES_PER_DIM: usize = 32;

/// Coefficients dropped by [`sine_expansion`] are at most this in magnitude.
pub const MODE_CUTOFF: f64 = 1e-12;

/// Expansion of `u0` in the raw eigenfunctions, modes up to
/// [`MAX_MODES_PER_DIM`] per dimension, dropping coefficients below
/// [`MODE_CUTOFF`].
///
/// `c_k = 2^n ∫ u0 φ_k` by a composite three-point rule with 128 cells per
/// dimension, evaluated as a separable sum.
pub fn sine_expansion(u0: &(dyn Fn(&[f64]) -> f64 + '_), dim: usize) -> Result<Vec<(SpectralMode, f64)>> {
    const CELLS: usize = 128;
    if !(dim == 1 || dim == 2) {
        return Err(Error::ParameterDomain(format!("dimension {dim} not in {{1,2}}")));
    }
    let h = 1.0 / CELLS as f64;
    let (xs, ws): (Vec<f64>, Vec<f64>) = (0..CELLS)
        .flat_map(|c| GAUSS3.iter().map(move |&(x, w)| ((c as f64 + x) * h, w * h)))
        .unzip();
    let kmax = MAX_MODES_PER_DIM;
    // sines[k-1][i] = w_i sin(kπ x_i)
    let sines: Vec<Vec<f64>> = (1..=kmax)
        .map(|k| xs.iter().zip(&ws).map(|(x, w)| w * (k as f64 * PI * x).sin()).collect())
        .collect();
    let mut out = Vec::new();
    if dim == 1 {
        let values = xs.iter().map(|&x| checked(u0(&[x]), &[x], 0.0)).collect::<Result<Vec<_>>>()?;
        for k in 1..=kmax {
            let c = 2.0 * dot(&sines[k - 1], &values);
            if c.abs() > MODE_CUTOFF {
                out.push((SpectralMode::one(k), c));
            }
        }
        return Ok(out);
    }
    let n = xs.len();
    let mut values = vec![0.0; n * n];
    for (j, &y) in xs.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            values[j * n + i] = checked(u0(&[x, y]), &[x, y], 0.0)?;
        }
    }
    // partial[l-1][i] = Σ_j w_j sin(lπ y_j) u0(x_i, y_j)
    let partial: Vec<Vec<f64>> = sines
        .iter()
        .map(|sl| (0..n).map(|i| (0..n).map(|j| sl[j] * values[j * n + i]).sum()).collect())
        .collect();
    for k in 1..=kmax {
        for l in 1..=kmax {
            let c = 4.0 * dot(&sines[k - 1], &partial[l - 1]);
            if c.abs() > MODE_CUTOFF {
                out.push((SpectralMode::two(k, l), c));
            }
        }
    }
    Ok(out)
}

/// Unforced separable data with initial datum `u0` expanded by [`sine_expansion`].
pub fn spectral_initial_data(u0: &(dyn Fn(&[f64]) -> f64 + '_), dim: usize) -> Result<SpectralData> {
    Ok(SpectralData {
        terms: sine_expansion(u0, dim)?
            .into_iter()
            .map(|(mode, initial)| ModalTerm {
                mode,
                initial,
                forcing: ModalForcing::Zero,
            })
            .collect(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L^s` on modal coefficients: scale each by `λ^s`.
pub fn fractional_power_apply(coeffs: &[f64], modes: &[SpectralMode], s: f64) -> Vec<f64> {
    coeffs
        .iter()
        .zip(modes)
        .map(|(c, m)| c * m.eigenvalue().powf(s))
        .collect()
}

/// Modal coefficient history at the nodes of a time grid.
#[derive(Clone, Debug)]
pub struct ModalTrajectory {
    pub mode: SpectralMode,
    pub values: Vec<f64>,
}

/// Refinement factor of the scalar reference scheme.
pub const FINE_FACTOR: usize = 16;

/// Scalar `∂_t^γ u + a u = g`, `u(0) = u0`, stepped on `steps` uniform
/// steps of `[0, T]` with the L1 scheme (backward Euler when γ = 1) and
/// step-averaged forcing. Returns `u` at every node.
pub fn scalar_l1_solve(a: f64, gamma: f64, u0: f64, forcing: &dyn Fn(f64) -> f64, final_time: f64, steps: usize) -> Result<Vec<f64>> {
    let grid = TimeGrid::new(final_time, steps)?;
    let tau = grid.tau;
    let mut u = Vec::with_capacity(steps + 1);
    u.push(u0);
    let weights = if gamma == 1.0 {
        None
    } else {
        Some(caputo_weights(gamma, steps, tau)?)
    };
    for k in 0..steps {
        let (t0, t1) = (grid.node(k), grid.node(k + 1));
        let g: f64 = GAUSS2.iter().map(|&(xi, w)| w * forcing(t0 + (t1 - t0) * xi)).sum();
        let (c, h) = match &weights {
            None => (1.0 / tau, u[k] / tau),
            Some(w) => (w.scale, w.scale * l1_known(&w.a, &u)),
        };
        u.push((h + g) / (c + a));
    }
    Ok(u)
}

/// Per-mode reference solution of the state equation at the nodes of `grid`.
///
/// Requires the separable form of `data`. For γ = 1 with zero or
/// exponential modal forcing the closed form is used; otherwise the scalar
/// L1 scheme runs with [`FINE_FACTOR`] substeps per step of `grid`.
pub fn spectral_solve_state(data: &ProblemData, gamma: f64, s: f64, grid: &TimeGrid) -> Result<Vec<ModalTrajectory>> {
    let spectral = data.spectral.as_ref().ok_or(Error::UnsupportedData)?;
    spectral_solve_terms(&spectral.terms, gamma, s, grid, FINE_FACTOR)
}

/// [`spectral_solve_state`] on explicit terms with a chosen refinement.
pub fn spectral_solve_terms(terms: &[ModalTerm], gamma: f64, s: f64, grid: &TimeGrid, factor: usize) -> Result<Vec<ModalTrajectory>> {
    terms
        .iter()
        .map(|term| {
            let a = term.mode.eigenvalue().powf(s);
            let values = match (&term.forcing, gamma == 1.0) {
                (ModalForcing::Zero, true) => grid.nodes().iter().map(|&t| term.initial * (-a * t).exp()).collect(),
                (ModalForcing::Exponential(g), true) => {
                    let r = g / (1.0 + a);
                    grid.nodes()
                        .iter()
                        .map(|&t| (term.initial - r) * (-a * t).exp() + r * t.exp())
                        .collect()
                }
                (forcing, _) => {
                    let fine = scalar_l1_solve(a, gamma, term.initial, &|t| forcing.eval(t), grid.final_time, grid.steps * factor)?;
                    fine.into_iter().step_by(factor).collect()
                }
            };
            Ok(ModalTrajectory { mode: term.mode, values })
        })
        .collect()
}

/// Evaluate a modal expansion at `x` from the values at node `k`.
pub fn modal_value(trajectories: &[ModalTrajectory], k: usize, x: &[f64]) -> f64 {
    trajectories.iter().map(|m| m.values[k] * m.mode.eval(x)).sum()
}

/// Exact optimal triple of a box-constrained tracking problem on (0,1)²,
/// with all data in closed form.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub s: f64,
    pub gamma: f64,
    pub mu: f64,
    pub final_time: f64,
    pub bounds: ControlBounds,
    pub mode: SpectralMode,
    /// `ū = θ(t) φ`
    pub state: SpaceTimeFn,
    /// `p̄ = −μ ρ(t) φ`
    pub adjoint: SpaceTimeFn,
    pub control: SpaceTimeFn,
    pub forcing: SpaceTimeFn,
    pub desired: SpaceTimeFn,
    /// Modal time profiles `θ`, `ρ` and `f + z̄` (coefficients of the raw `φ`).
    pub state_profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub adjoint_profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub source_profile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for ManufacturedSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedSolution")
            .field("s", &self.s)
            .field("gamma", &self.gamma)
            .field("mu", &self.mu)
            .field("final_time", &self.final_time)
            .finish_non_exhaustive()
    }
}

fn phi22(x: &[f64]) -> f64 {
    (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin()
}

/// Exponential-in-time solution for γ = 1:
/// `ū = e^t φ`, `p̄ = −μ (T−t) e^t φ`, `z̄ = clamp(−p̄/μ, 0, 1/2)`, with
/// `φ = sin(2πx₁) sin(2πx₂)`.
pub fn manufactured_problem(s: f64, mu: f64, final_time: f64) -> Result<ManufacturedSolution> {
    check_manufactured(s, 1.0, mu, final_time)?;
    let mode = SpectralMode::two(2, 2);
    let lam = mode.eigenvalue().powf(s);
    let t_end = final_time;
    let bounds = ControlBounds::new(0.0, 0.5, mu)?;
    let adjoint: SpaceTimeFn = Arc::new(move |x: &[f64], t: f64| -mu * (t_end - t) * t.exp() * phi22(x));
    let p = adjoint.clone();
    let control: SpaceTimeFn = Arc::new(move |x: &[f64], t: f64| (-p(x, t) / mu).clamp(0.0, 0.5));
    let z = control.clone();
    Ok(ManufacturedSolution {
        s,
        gamma: 1.0,
        mu,
        final_time,
        bounds,
        mode,
        state: Arc::new(|x: &[f64], t: f64| t.exp() * phi22(x)),
        adjoint,
        control,
        forcing: Arc::new(move |x: &[f64], t: f64| (1.0 + lam) * t.exp() * phi22(x) - z(x, t)),
        desired: Arc::new(move |x: &[f64], t: f64| {
            (1.0 - mu * (-1.0 + (1.0 - lam) * (t_end - t))) * t.exp() * phi22(x)
        }),
        state_profile: Arc::new(|t: f64| t.exp()),
        adjoint_profile: Arc::new(move |t: f64| -mu * (t_end - t) * t.exp()),
        source_profile: Arc::new(move |t: f64| (1.0 + lam) * t.exp()),
    })
}

/// Polynomial-in-time solution for γ ∈ (0, 1):
/// `ū = (1 + t²) φ`, `p̄ = −μ (T−t)(1+t) φ`, `z̄ = clamp(−p̄/μ, 0, 1/2)`.
///
/// Both Caputo derivatives of these profiles are closed-form, so `f` and
/// `u_d` follow from the state and adjoint equations.
pub fn fractional_manufactured_problem(s: f64, gamma: f64, mu: f64, final_time: f64) -> Result<ManufacturedSolution> {
    if gamma == 1.0 {
        return manufactured_problem(s, mu, final_time);
    }
    check_manufactured(s, gamma, mu, final_time)?;
    let mode = SpectralMode::two(2, 2);
    let lam = mode.eigenvalue().powf(s);
    let t_end = final_time;
    let g2 = gamma_fn(2.0 - gamma);
    let g3 = gamma_fn(3.0 - gamma);
    let e = 1.0 - gamma;
    let theta = |t: f64| 1.0 + t * t;
    // left Caputo derivative of 1 + t²
    let d_theta = move |t: f64| 2.0 * t.powf(1.0 + e) / g3;
    let rho = move |t: f64| (t_end - t) * (1.0 + t);
    // right Caputo derivative of (T − t)(1 + t)
    let d_rho = move |t: f64| {
        let r = (t_end - t).max(0.0);
        (1.0 + t_end) * r.powf(e) / g2 - 2.0 * r.powf(1.0 + e) / g3
    };
    let bounds = ControlBounds::new(0.0, 0.5, mu)?;
    let adjoint: SpaceTimeFn = Arc::new(move |x: &[f64], t: f64| -mu * rho(t) * phi22(x));
    let p = adjoint.clone();
    let control: SpaceTimeFn = Arc::new(move |x: &[f64], t: f64| (-p(x, t) / mu).clamp(0.0, 0.5));
    let z = control.clone();
    Ok(ManufacturedSolution {
        s,
        gamma,
        mu,
        final_time,
        bounds,
        mode,
        state: Arc::new(move |x: &[f64], t: f64| theta(t) * phi22(x)),
        adjoint,
        control,
        forcing: Arc::new(move |x: &[f64], t: f64| (d_theta(t) + lam * theta(t)) * phi22(x) - z(x, t)),
        desired: Arc::new(move |x: &[f64], t: f64| (theta(t) + mu * (d_rho(t) + lam * rho(t))) * phi22(x)),
        state_profile: Arc::new(theta),
        adjoint_profile: Arc::new(move |t: f64| -mu * rho(t)),
        source_profile: Arc::new(move |t: f64| d_theta(t) + lam * theta(t)),
    })
}

fn check_manufactured(s: f64, gamma: f64, mu: f64, final_time: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) || !(gamma > 0.0 && gamma <= 1.0) || !(mu > 0.0) || !(final_time > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "manufactured problem needs 0<s<1, 0<γ≤1, μ>0, T>0; got s={s}, γ={gamma}, μ={mu}, T={final_time}"
        )));
    }
    Ok(())
}

impl ManufacturedSolution {
    /// Data on (0,1)² with the separable form of `(u0, f + z̄)` attached.
    pub fn problem_data(&self) -> Result<ProblemData> {
        let theta0 = (self.state_profile)(0.0);
        let initial = Arc::new(move |x: &[f64]| theta0 * phi22(x));
        let forcing = if self.gamma == 1.0 {
            ModalForcing::Exponential((self.source_profile)(0.0))
        } else {
            ModalForcing::General(self.source_profile.clone())
        };
        Ok(ProblemData::new(2, self.forcing.clone(), self.desired.clone(), initial, self.bounds)?.with_spectral(SpectralData {
            terms: vec![ModalTerm {
                mode: self.mode,
                initial: theta0,
                forcing,
            }],
        }))
    }
}

/// Residual of the integration-by-parts identity
/// `∫ ∂_t^γ f g + f(0) (I_{T−t}^{1−γ} g)(0) = ∫ f ∂_{T−t}^γ g + g(T) (I_t^{1−γ} f)(T)`
/// for samples at the nodes of `grid`.
///
/// Caputo derivatives: L1 scheme (exact for the piecewise-linear
/// interpolant at the nodes). Fractional integrals: exact product
/// integration of the interpolant. Outer integrals: trapezoid rule.
pub fn fractional_ibp_check(f: &[f64], g: &[f64], gamma: f64, grid: &TimeGrid) -> Result<f64> {
    let k_max = grid.steps;
    if f.len() != k_max + 1 || g.len() != k_max + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} samples on {} steps",
            f.len(),
            g.len(),
            k_max
        )));
    }
    let weights = caputo_weights(gamma, k_max, grid.tau)?;
    let left = l1_at_nodes(f, &weights);
    let g_rev: Vec<f64> = g.iter().rev().copied().collect();
    let mut right = l1_at_nodes(&g_rev, &weights);
    right.reverse();
    let sigma = 1.0 - gamma;
    let lhs = trapezoid(&left, g, grid.tau) + f[0] * rl_integral_at_end(&g_rev, sigma, grid);
    let rhs = trapezoid(f, &right, grid.tau) + g[k_max] * rl_integral_at_end(f, sigma, grid);
    Ok((lhs - rhs).abs())
}

/// L1 derivative at every node; zero at `t_0`.
fn l1_at_nodes(samples: &[f64], weights: &crate::evolution::CaputoWeights) -> Vec<f64> {
    let a = &weights.a;
    let mut out = vec![0.0; samples.len()];
    for n in 1..samples.len() {
        // Σ_{j=0}^{n-1} a_j (φ^{n-j} − φ^{n-j-1})
        let mut acc = 0.0;
        for j in 0..n {
            acc += a[j] * (samples[n - j] - samples[n - j - 1]);
        }
        out[n] = weights.scale * acc;
    }
    out
}

fn trapezoid(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let n = a.len() - 1;
    let inner: f64 = (1..n).map(|k| a[k] * b[k]).sum();
    tau * (inner + 0.5 * (a[0] * b[0] + a[n] * b[n]))
}

/// `(I^σ v)(T)` for the piecewise-linear interpolant of node samples.
pub fn rl_integral_at_end(v: &[f64], sigma: f64, grid: &TimeGrid) -> f64 {
    let t_end = grid.final_time;
    let tau = grid.tau;
    let mut acc = 0.0;
    for j in 0..grid.steps {
        let a = t_end - grid.node(j + 1);
        let b = t_end - grid.node(j);
        let pa = a.max(0.0).powf(sigma);
        let pb = b.powf(sigma);
        let base = (pb - pa) / sigma;
        let first = (b * pb - a.max(0.0) * pa) / (sigma + 1.0) - a * base;
        acc += v[j + 1] * base + (v[j] - v[j + 1]) / tau * first;
    }
    acc / gamma_fn(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::OmegaMesh;
    use crate::quadrature::cell_rule;

    #[test]
    fn eigenvalues() {
        assert!((SpectralMode::two(1, 1).eigenvalue() - 2.0 * PI * PI).abs() < 1e-13);
        assert!((SpectralMode::one(3).eigenvalue() - 9.0 * PI * PI).abs() < 1e-12);
        let modes = [SpectralMode::two(2, 2)];
        let f = fractional_power_apply(&[1.0], &modes, 0.5)[0];
        assert!((f - 8f64.sqrt() * PI).abs() < 1e-13);
        assert_eq!(fractional_power_apply(&[2.5], &modes, 0.0)[0], 2.5);
        let classical = fractional_power_apply(&[1.0], &modes, 1.0)[0];
        assert!((classical - 8.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn power_is_multiplicative() {
        let modes: Vec<_> = (1..5).flat_map(|k| (1..5).map(move |l| SpectralMode::two(k, l))).collect();
        let coeffs: Vec<f64> = (0..modes.len()).map(|i| 1.0 + i as f64).collect();
        let two_step = fractional_power_apply(&fractional_power_apply(&coeffs, &modes, 0.3), &modes, 0.45);
        let one_step = fractional_power_apply(&coeffs, &modes, 0.75);
        for (a, b) in two_step.iter().zip(&one_step) {
            assert!((a - b).abs() <= 1e-13 * b);
        }
    }

    #[test]
    fn eigenfunctions_orthonormal_under_cell_quadrature() {
        let omega = OmegaMesh::unit(2, 8).unwrap();
        let rule = cell_rule(2);
        let modes: Vec<_> = (1..=4).flat_map(|k| (1..=4).map(move |l| SpectralMode::two(k, l))).collect();
        for (i, a) in modes.iter().enumerate() {
            for b in &modes[i..] {
                let mut g = 0.0;
                for c in 0..omega.n_cells() {
                    for &(r, w) in &rule {
                        let x = omega.map_to_cell(c, r);
                        g += w * omega.cell_volume() * a.eval_normalized(&x) * b.eval_normalized(&x);
                    }
                }
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((g - expected).abs() <= 1e-10, "{a:?} {b:?}: {g}");
            }
        }
    }

    #[test]
    fn homogeneous_decay_closed_form() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let term = ModalTerm {
            mode: SpectralMode::two(1, 1),
            initial: 1.0,
            forcing: ModalForcing::Zero,
        };
        let traj = spectral_solve_terms(&[term], 1.0, 0.3, &grid, FINE_FACTOR).unwrap();
        let a = (2.0 * PI * PI).powf(0.3);
        for (k, v) in traj[0].values.iter().enumerate() {
            assert!((v - (-a * grid.node(k)).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn non_separable_data_is_rejected() {
        let data = ProblemData::homogeneous(2, ControlBounds::new(0.0, 1.0, 1.0).unwrap()).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        assert!(matches!(spectral_solve_state(&data, 1.0, 0.5, &grid), Err(Error::UnsupportedData)));
    }

    #[test]
    fn manufactured_mode_is_exponential() {
        let sol = manufactured_problem(0.4, 1.0, 1.0).unwrap();
        let data = sol.problem_data().unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let traj = spectral_solve_state(&data, 1.0, 0.4, &grid).unwrap();
        for (k, v) in traj[0].values.iter().enumerate() {
            assert!((v - grid.node(k).exp()).abs() < 1e-13);
        }
    }

    /// Central difference of a time profile.
    fn derivative(f: &dyn Fn(f64) -> f64, t: f64) -> f64 {
        let h = 1e-5;
        (8.0 * (f(t + h) - f(t - h)) - (f(t + 2.0 * h) - f(t - 2.0 * h))) / (12.0 * h)
    }

    #[test]
    fn manufactured_triple_solves_optimality_system() {
        for s in [0.2, 0.5, 0.8] {
            let mu = 0.7;
            let sol = manufactured_problem(s, mu, 1.0).unwrap();
            let lam = sol.mode.eigenvalue().powf(s);
            let x = [0.13, 0.31];
            let phi = SpectralMode::two(2, 2).eval(&x);
            for t in [0.1, 0.35, 0.6, 0.9] {
                let u = |t: f64| (sol.state)(&x, t);
                let p = |t: f64| (sol.adjoint)(&x, t);
                // ∂_t ū + L^s ū = f + z̄
                let r_state = derivative(&u, t) + lam * u(t) - (sol.forcing)(&x, t) - (sol.control)(&x, t);
                // −∂_t p̄ + L^s p̄ = ū − u_d
                let r_adj = -derivative(&p, t) + lam * p(t) - (u(t) - (sol.desired)(&x, t));
                assert!(r_state.abs() < 1e-8 * (1.0 + lam), "s {s} t {t}: {r_state}");
                assert!(r_adj.abs() < 1e-8 * (1.0 + lam), "s {s} t {t}: {r_adj}");
                let z = (sol.control)(&x, t);
                assert_eq!(z, (-p(t) / mu).clamp(0.0, 0.5));
                assert!((0.0..=0.5).contains(&z));
            }
            assert_eq!((sol.adjoint)(&x, 1.0), 0.0);
            assert!(((sol.state)(&x, 0.0) - phi).abs() < 1e-15);
        }
    }

    #[test]
    fn control_hits_upper_bound_where_adjoint_is_large() {
        let sol = manufactured_problem(0.5, 1.0, 1.0).unwrap();
        let x = [0.25, 0.25];
        assert!(-(sol.adjoint)(&x, 0.2) > 0.5);
        assert_eq!((sol.control)(&x, 0.2), 0.5);
        assert_eq!((sol.control)(&[0.75, 0.25], 0.2), 0.0);
    }

    #[test]
    fn fractional_manufactured_profiles_match_fine_l1() {
        let gamma = 0.5;
        let sol = fractional_manufactured_problem(0.4, gamma, 1.0, 1.0).unwrap();
        let lam = sol.mode.eigenvalue().powf(0.4);
        // state: ∂^γ θ + λ^s θ = source, θ(0) = 1
        let src = sol.source_profile.clone();
        let u = scalar_l1_solve(lam, gamma, 1.0, &|t| src(t), 1.0, 4096).unwrap();
        let err_u = (u.last().unwrap() - (sol.state_profile)(1.0)).abs();
        assert!(err_u < 1e-3, "{err_u}");
        // adjoint in reversed time: ∂^γ ρ̃ + λ^s ρ̃ = (ū − u_d)-profile, ρ̃(0) = 0
        let x = [0.125, 0.125];
        let phi = sol.mode.eval(&x);
        let resid = |t: f64| ((sol.state)(&x, 1.0 - t) - (sol.desired)(&x, 1.0 - t)) / phi;
        let p = scalar_l1_solve(lam, gamma, 0.0, &resid, 1.0, 4096).unwrap();
        let err_p = (p[4096] - (sol.adjoint_profile)(0.0)).abs();
        assert!(err_p < 2e-3, "{err_p}");
        let mid = (p[2048] - (sol.adjoint_profile)(0.5)).abs();
        assert!(mid < 2e-3, "{mid}");
    }

    #[test]
    fn scalar_l1_self_converges() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let term = ModalTerm {
            mode: SpectralMode::two(1, 2),
            initial: 1.0,
            forcing: ModalForcing::General(Arc::new(|t: f64| (3.0 * t).cos())),
        };
        let at = |factor: usize| spectral_solve_terms(std::slice::from_ref(&term), 0.5, 0.6, &grid, factor).unwrap()[0].values[8];
        let (a, b, c) = (at(16), at(32), at(64));
        assert!((a - b).abs() >= 1.3 * (b - c).abs(), "{a} {b} {c}");
    }

    #[test]
    fn spectral_stability_bound_uniform_over_modes() {
        use crate::evolution::lambda_diagnostic;
        let grid = TimeGrid::new(1.0, 32).unwrap();
        for gamma in [1.0, 0.5] {
            let bound = 1.0 + 1.0 / gamma_fn(2.0 - gamma);
            for k in 1..=4 {
                for l in 1..=4 {
                    let mode = SpectralMode::two(k, l);
                    let term = ModalTerm {
                        mode,
                        initial: 1.0,
                        forcing: ModalForcing::General(Arc::new(|t: f64| 1.0 + t)),
                    };
                    let traj = spectral_solve_terms(&[term], gamma, 0.5, &grid, 4).unwrap();
                    let n2 = mode.raw_norm().powi(2);
                    let norms: Vec<f64> = traj[0].values.iter().map(|v| v * v * n2).collect();
                    let g: Vec<f64> = (1..=32).map(|k| (1.0 + grid.node(k)) * mode.raw_norm()).collect();
                    let lam2 = lambda_diagnostic(&norms, gamma, &grid, &g);
                    let data = n2 + g.iter().map(|v| grid.tau * v * v).sum::<f64>();
                    assert!(lam2 <= bound * data, "{mode:?}: {lam2} vs {data}");
                }
            }
        }
    }

    #[test]
    fn ibp_linear_against_constant() {
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        let f: Vec<f64> = grid.nodes();
        let g = vec![1.0; 10_001];
        assert!(fractional_ibp_check(&f, &g, 0.5, &grid).unwrap() <= 1e-6);
        assert!(fractional_ibp_check(&f, &f, 0.5, &grid).unwrap() <= 1e-6);
    }

    #[test]
    fn ibp_sides_match_closed_forms() {
        let gamma = 0.5;
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let t = grid.nodes();
        // I^{1/2} t at T = T^{3/2} / Γ(5/2)
        let i = rl_integral_at_end(&t, 0.5, &grid);
        assert!((i - 1.0 / gamma_fn(2.5)).abs() < 1e-12);
        let w = caputo_weights(gamma, 2000, grid.tau).unwrap();
        let d = l1_at_nodes(&t, &w);
        assert!((d[2000] - 1.0 / gamma_fn(1.5)).abs() < 1e-10);
    }

    #[test]
    fn ibp_error_decays_under_refinement() {
        let gamma = 0.5;
        let res = |k: usize| {
            let grid = TimeGrid::new(1.0, k).unwrap();
            let t = grid.nodes();
            let f: Vec<f64> = t.iter().map(|t| (2.0 * t).sin()).collect();
            let g: Vec<f64> = t.iter().map(|t| t * t + 1.0).collect();
            fractional_ibp_check(&f, &g, gamma, &grid).unwrap()
        };
        let (a, b, c) = (res(100), res(200), res(400));
        assert!(a >= 2.0 * b && b >= 2.0 * c, "{a} {b} {c}");
    }

    #[test]
    fn sine_expansion_recovers_finite_sums() {
        let u0 = |x: &[f64]| (PI * x[0]).sin() * (PI * x[1]).sin() + 0.3 * (2.0 * PI * x[0]).sin() * (3.0 * PI * x[1]).sin();
        let modes = sine_expansion(&u0, 2).unwrap();
        let big: Vec<_> = modes.iter().filter(|(_, c)| c.abs() > 1e-9).collect();
        assert_eq!(big.len(), 2, "{big:?}");
        assert_eq!(big[0].0, SpectralMode::two(1, 1));
        assert!((big[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(big[1].0, SpectralMode::two(2, 3));
        assert!((big[1].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sine_expansion_of_parabola() {
        // x(1−x) = Σ_{k odd} 8/(k³π³) sin(kπx)
        let modes = sine_expansion(&|x: &[f64]| x[0] * (1.0 - x[0]), 1).unwrap();
        assert!(modes.len() <= MAX_MODES_PER_DIM);
        for (mode, c) in &modes {
            let k = mode.k as f64;
            let exact = if mode.k % 2 == 1 { 8.0 / (k * PI).powi(3) } else { 0.0 };
            assert!((c - exact).abs() < 1e-10, "k = {k}: {c} vs {exact}");
        }
        assert_eq!(modes.iter().filter(|(m, _)| m.k % 2 == 1).count(), 16);
        let data = spectral_initial_data(&|x: &[f64]| x[0] * (1.0 - x[0]), 1).unwrap();
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let traj = spectral_solve_terms(&data.terms, 1.0, 0.5, &grid, 1).unwrap();
        // each mode decays independently
        let v = modal_value(&traj, 0, &[0.5]);
        assert!((v - 0.25).abs() < 1e-4);
    }
}
