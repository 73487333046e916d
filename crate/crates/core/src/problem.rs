//! Problem parameters, data functions and derived constants.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use statrs::function::gamma::gamma as gamma_fn;

use crate::oracle::SpectralMode;
use crate::{Error, Result};

/// Function of a point of Ω and a time.
pub type SpaceTimeFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// Function of a point of Ω.
pub type SpaceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Function of time only.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Orders of the fractional operators and the extension constants they induce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FractionalParams {
    /// Spatial order, `0 < s < 1`.
    pub s: f64,
    /// Temporal order, `0 < gamma <= 1`.
    pub gamma: f64,
    /// Weight exponent of the extension, `1 - 2s`.
    pub alpha: f64,
    /// Normalisation `2^alpha Γ(1-s) / Γ(s)` of the conormal derivative.
    pub d_s: f64,
    /// Height of the truncated cylinder.
    pub truncation_height: f64,
}

impl FractionalParams {
    pub fn new(s: f64, gamma: f64, height: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::ParameterDomain(format!("s = {s} not in (0,1)")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::ParameterDomain(format!("gamma = {gamma} not in (0,1]")));
        }
        if !(height >= 1.0) || !height.is_finite() {
            return Err(Error::ParameterDomain(format!("truncation height {height} < 1")));
        }
        let alpha = 1.0 - 2.0 * s;
        // Γ(1-s)/Γ(s) is exactly one at s = 1/2; keep that exact.
        let d_s = if s == 0.5 {
            1.0
        } else {
            2f64.powf(alpha) * gamma_fn(1.0 - s) / gamma_fn(s)
        };
        Ok(Self {
            s,
            gamma,
            alpha,
            d_s,
            truncation_height: height,
        })
    }

    /// Same orders, different cylinder height.
    pub fn with_height(&self, height: f64) -> Result<Self> {
        Self::new(self.s, self.gamma, height)
    }

    /// `true` when the time derivative is the classical first derivative.
    pub fn is_first_order_in_time(&self) -> bool {
        self.gamma == 1.0
    }
}

/// Cylinder height balancing the truncation error against the discretisation error.
///
/// With λ₁ = nπ² the first eigenvalue of the unit cube, returns
/// `max(1, 2(1+s) log N / (√λ₁ (n+1)))`, so `exp(-√λ₁ Y / 2)` is below
/// `N^{-(1+s)/(n+1)}`.
pub fn select_truncation(dofs: usize, s: f64, dim: usize) -> f64 {
    let lambda1 = dim as f64 * PI * PI;
    let n = (dofs.max(1)) as f64;
    let y = 2.0 * (1.0 + s) * n.ln() / (lambda1.sqrt() * (dim as f64 + 1.0));
    y.max(1.0)
}

/// Uniform partition of [0, T].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub final_time: f64,
    pub steps: usize,
    pub tau: f64,
}

impl TimeGrid {
    pub fn new(final_time: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ParameterDomain("time grid needs K >= 1".into()));
        }
        if !(final_time > 0.0) || !final_time.is_finite() {
            return Err(Error::ParameterDomain(format!("final time {final_time} <= 0")));
        }
        Ok(Self {
            final_time,
            steps,
            tau: final_time / steps as f64,
        })
    }

    /// Node `t_k`; the last node is exactly `T`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.final_time
        } else {
            k as f64 * self.tau
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Refined grid with `factor` substeps per step.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            final_time: self.final_time,
            steps: self.steps * factor,
            tau: self.final_time / (self.steps * factor) as f64,
        }
    }
}

/// Constant box bounds and the regularisation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlBounds {
    pub lower: f64,
    pub upper: f64,
    pub mu: f64,
}

impl ControlBounds {
    pub fn new(lower: f64, upper: f64, mu: f64) -> Result<Self> {
        if lower > upper {
            return Err(Error::Bounds { lower, upper });
        }
        if !(lower <= 0.0 && upper >= 0.0) {
            return Err(Error::ParameterDomain(format!(
                "bounds must satisfy a <= 0 <= b, got [{lower}, {upper}]"
            )));
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::ParameterDomain(format!("mu = {mu} must be positive")));
        }
        Ok(Self { lower, upper, mu })
    }
}

/// Time profile of one spectral mode of the forcing.
#[derive(Clone)]
pub enum ModalForcing {
    Zero,
    /// `g e^t`
    Exponential(f64),
    General(TimeFn),
}

impl ModalForcing {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ModalForcing::Zero => 0.0,
            ModalForcing::Exponential(g) => g * t.exp(),
            ModalForcing::General(f) => f(t),
        }
    }
}

impl fmt::Debug for ModalForcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalForcing::Zero => write!(f, "Zero"),
            ModalForcing::Exponential(g) => write!(f, "Exponential({g})"),
            ModalForcing::General(_) => write!(f, "General(..)"),
        }
    }
}

/// One term `(u0_k + forcing_k(t)) φ_k` of a separable data set, with the
/// raw (unnormalised) eigenfunction `φ_k`.
#[derive(Clone, Debug)]
pub struct ModalTerm {
    pub mode: SpectralMode,
    pub initial: f64,
    pub forcing: ModalForcing,
}

/// Finite spectral expansion of `(u0, f + z)` that the oracle consumes exactly.
#[derive(Clone, Debug, Default)]
pub struct SpectralData {
    pub terms: Vec<ModalTerm>,
}

/// State equation and tracking data on Ω = (0,1)^n.
#[derive(Clone)]
pub struct ProblemData {
    pub dim: usize,
    pub forcing: SpaceTimeFn,
    pub desired: SpaceTimeFn,
    pub initial: SpaceFn,
    pub reaction: f64,
    pub bounds: ControlBounds,
    pub spectral: Option<SpectralData>,
}

impl ProblemData {
    pub fn new(
        dim: usize,
        forcing: SpaceTimeFn,
        desired: SpaceTimeFn,
        initial: SpaceFn,
        bounds: ControlBounds,
    ) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::ParameterDomain(format!("dimension {dim} not in {{1,2}}")));
        }
        Ok(Self {
            dim,
            forcing,
            desired,
            initial,
            reaction: 0.0,
            bounds,
            spectral: None,
        })
    }

    pub fn with_reaction(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::ParameterDomain(format!("reaction c = {c} must be >= 0")));
        }
        self.reaction = c;
        Ok(self)
    }

    pub fn with_spectral(mut self, spectral: SpectralData) -> Self {
        self.spectral = Some(spectral);
        self
    }

    /// Zero forcing, zero desired state, zero initial datum.
    pub fn homogeneous(dim: usize, bounds: ControlBounds) -> Result<Self> {
        Self::new(
            dim,
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            bounds,
        )
    }
}

impl fmt::Debug for ProblemData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemData")
            .field("dim", &self.dim)
            .field("reaction", &self.reaction)
            .field("bounds", &self.bounds)
            .field("spectral", &self.spectral.is_some())
            .finish_non_exhaustive()
    }
}

/// Evaluate and reject non-finite values.
pub(crate) fn checked(value: f64, x: &[f64], t: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Data(format!("x = {x:?}, t = {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_order_has_unit_normalisation() {
        let p = FractionalParams::new(0.5, 1.0, 1.0).unwrap();
        assert_eq!(p.alpha, 0.0);
        assert_eq!(p.d_s, 1.0);
    }

    #[test]
    fn alpha_for_s_08() {
        let p = FractionalParams::new(0.8, 1.0, 1.0).unwrap();
        assert!((p.alpha + 0.6).abs() < 1e-15);
    }

    #[test]
    fn gamma_routine_matches_factorials() {
        let mut fact = 1.0;
        for n in 1..15u32 {
            if n > 1 {
                fact *= (n - 1) as f64;
            }
            let g = gamma_fn(n as f64);
            assert!((g - fact).abs() <= 1e-13 * fact, "Γ({n}) = {g}, expected {fact}");
        }
    }

    #[test]
    fn normalisation_for_quarter_order() {
        // 2^{1/2} Γ(3/4) / Γ(1/4), evaluated at 30 digits
        let p = FractionalParams::new(0.25, 1.0, 1.0).unwrap();
        assert!((p.d_s - 0.477_988_797_486_125_03).abs() < 1e-13);
        let p = FractionalParams::new(0.8, 1.0, 1.0).unwrap();
        assert!((p.d_s - 2.601_571_890_705_799_7).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(FractionalParams::new(0.0, 1.0, 1.0).is_err());
        assert!(FractionalParams::new(1.0, 1.0, 1.0).is_err());
        assert!(FractionalParams::new(0.5, 0.0, 1.0).is_err());
        assert!(FractionalParams::new(0.5, 1.1, 1.0).is_err());
        assert!(FractionalParams::new(0.5, 1.0, 0.9).is_err());
        assert!(ControlBounds::new(0.5, 0.0, 1.0).is_err());
        assert!(ControlBounds::new(0.1, 0.5, 1.0).is_err());
        assert!(ControlBounds::new(0.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn truncation_examples() {
        // 3 log 8 / (2π) = 0.993 is floored at one
        assert_eq!(select_truncation(8, 0.5, 1), 1.0);
        let y = select_truncation(1_000_000, 0.8, 2);
        assert!((y - 3.731_498_871_412_8).abs() < 1e-10, "{y}");
        assert_eq!(select_truncation(10, 0.1, 2), 1.0);
    }

    #[test]
    fn time_grid_endpoints() {
        let g = TimeGrid::new(0.7, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 0.7);
        let nodes = g.nodes();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_plus_two_s_is_one(s in 1e-6f64..0.999_999) {
                let p = FractionalParams::new(s, 1.0, 1.0).unwrap();
                prop_assert!((p.alpha + 2.0 * s - 1.0).abs() <= 4.0 * f64::EPSILON);
                prop_assert!(p.alpha > -1.0 && p.alpha < 1.0);
                prop_assert!(p.d_s > 0.0);
            }

            #[test]
            fn truncation_monotone(n in 8usize..10_000_000, dn in 0usize..1000, s in 0.01f64..0.98, ds in 0.0f64..0.01, dim in 1usize..=2) {
                let y = select_truncation(n, s, dim);
                prop_assert!(y >= 1.0);
                prop_assert!(select_truncation(n + dn, s, dim) >= y);
                prop_assert!(select_truncation(n, s + ds, dim) >= y);
            }
        }
    }

    #[test]
    fn normalisation_continuous_at_half() {
        let left = FractionalParams::new(0.5 - 1e-7, 1.0, 1.0).unwrap().d_s;
        let right = FractionalParams::new(0.5 + 1e-7, 1.0, 1.0).unwrap().d_s;
        assert!((left - 1.0).abs() < 1e-5 && (right - 1.0).abs() < 1e-5);
    }
}
