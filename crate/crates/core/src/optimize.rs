//! Projected limited-memory BFGS for box-constrained smooth objectives.
//!
//! Coordinates within `ε = min(ε_max, ‖x − P(x − ∇f)‖)` of a bound whose
//! gradient points outward are treated as active and take a steepest
//! descent step; the quasi-Newton direction acts on the remaining ones.
//! All inner products carry a uniform weight so that norms match the
//! `ℓ²(L²)` norm of piecewise-constant controls.

use std::collections::VecDeque;

use crate::{Error, Result};

/// Smooth objective over the box `[lower, upper]^dim`.
pub trait BoxObjective {
    fn dim(&self) -> usize;

    /// Uniform weight of the inner product `⟨x, y⟩ = w Σ x_i y_i`.
    fn weight(&self) -> f64 {
        1.0
    }

    fn bounds(&self) -> (f64, f64);

    /// Scale `b` of the initial Hessian approximation `b I`.
    fn curvature_seed(&self) -> f64 {
        1.0
    }

    /// Value and Riesz gradient with respect to the weighted inner product.
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// `f(x + step) − f(x)` when it can be computed without cancellation.
    fn cost_change(&mut self, _x: &[f64], _step: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    /// Stop once the projected-gradient norm is at most this.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    /// Sufficient-decrease constant of the Armijo rule.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Upper limit of the active-set tolerance.
    pub active_eps: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
            active_eps: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Projected-gradient norm at every iterate, the last one included.
    pub pg_history: Vec<f64>,
    /// Objective value at every iterate.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl OptimizeResult {
    pub fn pg_norm(&self) -> f64 {
        *self.pg_history.last().unwrap()
    }
}

fn wdot(w: f64, a: &[f64], b: &[f64]) -> f64 {
    w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// `‖x − clamp(x − g)‖`
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: f64, upper: f64, weight: f64) -> f64 {
    let sum: f64 = x
        .iter()
        .zip(g)
        .map(|(&xi, &gi)| (xi - (xi - gi).clamp(lower, upper)).powi(2))
        .sum();
    (weight * sum).sqrt()
}

/// Minimize `f` over the box from `x0` (clamped first).
pub fn projected_bfgs(f: &mut dyn BoxObjective, x0: &[f64], opts: &BfgsOptions) -> Result<OptimizeResult> {
    let n = f.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!("start of length {} for {n} unknowns", x0.len())));
    }
    let (lo, hi) = f.bounds();
    if lo > hi {
        return Err(Error::Bounds { lower: lo, upper: hi });
    }
    let w = f.weight();
    let h0 = 1.0 / f.curvature_seed();
    let mut x: Vec<f64> = x0.iter().map(|v| v.clamp(lo, hi)).collect();
    let (mut fx, mut g) = f.evaluate(&x)?;
    let mut evaluations = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut pg_history = Vec::new();
    let mut cost_history = vec![fx];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let pg = projected_gradient_norm(&x, &g, lo, hi, w);
        pg_history.push(pg);
        if pg <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let eps = opts.active_eps.min(pg);
        let active: Vec<bool> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| (xi - lo <= eps && gi > 0.0) || (hi - xi <= eps && gi < 0.0))
            .collect();

        let mut accepted = None;
        for attempt in 0..2 {
            let d = if attempt == 0 && !pairs.is_empty() {
                // newest pair rescales the seed, never above 1/mu
                let (s, y) = pairs.back().expect("nonempty");
                let scaled = wdot(w, s, y) / wdot(w, y, y);
                two_loop(&g, &active, &pairs, h0.min(scaled), w)
            } else {
                g.iter()
                    .zip(&active)
                    .map(|(gi, &a)| if a { -gi } else { -h0 * gi })
                    .collect()
            };
            if let Some(step) = line_search(f, &x, fx, &g, &d, lo, hi, w, opts, &mut evaluations)? {
                accepted = Some(step);
                break;
            }
            pairs.clear();
        }
        let Some(Accepted { x: x_new, change, evaluated }) = accepted else {
            break;
        };
        let (_, g_new) = match evaluated {
            Some(e) => e,
            None => {
                evaluations += 1;
                f.evaluate(&x_new)?
            }
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = wdot(w, &s, &y);
        if sy > 1e-12 * wdot(w, &s, &s).sqrt() * wdot(w, &y, &y).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        x = x_new;
        // accumulated changes carry no round-off of the size of f
        fx += change;
        g = g_new;
        cost_history.push(fx);
        iterations += 1;
    }

    Ok(OptimizeResult {
        x,
        cost: fx,
        pg_history,
        cost_history,
        iterations,
        evaluations,
        converged,
    })
}

/// L-BFGS direction on the inactive coordinates, steepest descent on the
/// active ones.
fn two_loop(g: &[f64], active: &[bool], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>, h0: f64, w: f64) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(active).map(|(x, &a)| if a { 0.0 } else { *x }).collect()
    };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let sm = mask(s);
        let ym = mask(y);
        let sy = wdot(w, &sm, &ym);
        if sy <= 0.0 {
            alphas.push(None);
            continue;
        }
        let a = wdot(w, &sm, &q) / sy;
        q.iter_mut().zip(&ym).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(Some((a, sm, ym, sy)));
    }
    q.iter_mut().for_each(|qi| *qi *= h0);
    for entry in alphas.into_iter().rev().flatten() {
        let (a, sm, ym, sy) = entry;
        let b = wdot(w, &ym, &q) / sy;
        q.iter_mut().zip(&sm).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter()
        .zip(g)
        .zip(active)
        .map(|((qi, gi), &a)| if a { -gi } else { -qi })
        .collect()
}

/// Point accepted by the line search.
struct Accepted {
    x: Vec<f64>,
    /// `f(x_new) − f(x)`
    change: f64,
    /// Value and gradient at `x_new`, when the search already computed them.
    evaluated: Option<(f64, Vec<f64>)>,
}

/// Armijo backtracking along the projected path `clamp(x + t d)`.
///
/// The decrease is taken from [`BoxObjective::cost_change`] when available.
/// Otherwise it is `f(x_t) − f(x)`, replaced by the trapezoid value
/// `½⟨∇f(x) + ∇f(x_t), x_t − x⟩` once the difference drops to the
/// round-off level of `f`.
#[allow(clippy::too_many_arguments)]
fn line_search(
    f: &mut dyn BoxObjective,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    lo: f64,
    hi: f64,
    w: f64,
    opts: &BfgsOptions,
    evaluations: &mut usize,
) -> Result<Option<Accepted>> {
    let mut t = 1.0;
    for _ in 0..opts.max_backtracks {
        let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| (xi + t * di).clamp(lo, hi)).collect();
        let step: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
        let slope = wdot(w, g, &step);
        if slope >= 0.0 || step.iter().all(|&v| v == 0.0) {
            return Ok(None);
        }
        let (change, evaluated) = match f.cost_change(x, &step)? {
            Some(df) => (df, None),
            None => {
                *evaluations += 1;
                let (ft, gt) = f.evaluate(&trial)?;
                let mut df = ft - fx;
                if df.abs() <= 1e3 * f64::EPSILON * fx.abs() {
                    let gsum: Vec<f64> = g.iter().zip(&gt).map(|(a, b)| a + b).collect();
                    df = 0.5 * wdot(w, &gsum, &step);
                }
                (df, Some((ft, gt)))
            }
        };
        if change <= opts.armijo * slope {
            return Ok(Some(Accepted {
                x: trial,
                change,
                evaluated,
            }));
        }
        t *= opts.backtrack;
    }
    Ok(None)
}
