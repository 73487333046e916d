//! Experiment configuration, error norms, rate fits and CSV reports.
//!
//! Every run is deterministic given its [`ExperimentConfig`]. Reports are
//! written as `report.csv` (one row per discretization) and `rates.csv`
//! (one row per fitted slope).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::assembly::omega_mass;
use crate::control::{adjoint_means, l2_project, solve_control, vi_residual, ControlField, ControlSolution, ReducedProblem};
use crate::evolution::solve_state;
use crate::mesh::{build_cylinder, default_zeta, free_node_count, graded_axis, CylinderMesh, OmegaMesh};
use crate::optimize::BfgsOptions;
use crate::oracle::{fractional_manufactured_problem, modal_value, spectral_solve_state, SpectralMode};
use crate::problem::{
    select_truncation, ControlBounds, FractionalParams, ModalForcing, ModalTerm, ProblemData, SpectralData, TimeGrid,
};
use crate::quadrature::cell_rule;
use crate::{Error, Result};

/// Pointwise function of space and time.
pub type Exact = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

const REPORT_HEADER: [&str; 13] = [
    "case", "s", "gamma", "M", "K", "N", "zeta", "Y", "err_control", "err_state", "cost", "iters", "pg_norm",
];
const RATES_HEADER: [&str; 6] = ["case", "s", "gamma", "quantity", "slope", "levels_used"];

/// Number of finest levels used by every slope fit.
pub const FIT_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    SolveState,
    SolveControl,
    ConvergenceSpace,
    ConvergenceTime,
    Truncation,
    OracleCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SolveState => "solve-state",
            ExperimentKind::SolveControl => "solve-control",
            ExperimentKind::ConvergenceSpace => "conv-space",
            ExperimentKind::ConvergenceTime => "conv-time",
            ExperimentKind::Truncation => "truncation",
            ExperimentKind::OracleCheck => "oracle-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "solve-state" => ExperimentKind::SolveState,
            "solve-control" => ExperimentKind::SolveControl,
            "conv-space" | "convergence-space" => ExperimentKind::ConvergenceSpace,
            "conv-time" | "convergence-time" => ExperimentKind::ConvergenceTime,
            "truncation" => ExperimentKind::Truncation,
            "oracle-check" => ExperimentKind::OracleCheck,
            other => return Err(Error::Config(format!("unknown experiment kind `{other}`"))),
        })
    }
}

/// One experiment. Lists are swept in order; single-valued experiments
/// use the first entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub s: Vec<f64>,
    pub gamma: f64,
    pub final_time: f64,
    pub mu: f64,
    /// Time steps `K`.
    pub steps: Vec<usize>,
    /// Cells per dimension of Ω, also the number of graded axis intervals.
    pub refinements: Vec<usize>,
    pub zeta: Option<f64>,
    /// Cylinder heights; the truncation study sweeps them, other
    /// experiments use the first as an override of the default height.
    pub heights: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let (s, steps, refinements, heights) = match kind {
            ExperimentKind::SolveState | ExperimentKind::SolveControl => (vec![0.5], vec![64], vec![8], vec![]),
            ExperimentKind::ConvergenceSpace => (vec![0.2, 0.4, 0.6, 0.8], vec![64], vec![4, 6, 8, 12, 16], vec![]),
            ExperimentKind::ConvergenceTime => (vec![0.5], vec![8, 16, 32, 64], vec![12], vec![]),
            ExperimentKind::Truncation => (vec![0.5], vec![16], vec![8], vec![1.0, 1.5, 2.0, 2.5, 3.0]),
            ExperimentKind::OracleCheck => (vec![0.3, 0.7], vec![2048], vec![4, 8, 16], vec![]),
        };
        Self {
            kind,
            s,
            gamma: 1.0,
            final_time: 1.0,
            mu: 1.0,
            steps,
            refinements,
            zeta: None,
            heights,
            tol: 1e-9,
            max_iter: 500,
            out: PathBuf::from("out"),
        }
    }

    /// Parse `key = value` lines grouped under `[section]` headers. The
    /// experiment kind comes from a `kind` key or from `fallback`; the
    /// defaults of that kind fill every key not given.
    pub fn from_ini_str(text: &str, fallback: Option<ExperimentKind>) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let pairs: Vec<(String, String)> = ini
            .iter()
            .flat_map(|(_, props)| props.iter().map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect();
        let declared = pairs
            .iter()
            .find(|(k, _)| k == "kind")
            .map(|(_, v)| v.parse::<ExperimentKind>())
            .transpose()?;
        let kind = match (declared, fallback) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("file declares `{a}` but `{b}` was requested")));
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("no experiment kind given".into())),
        };
        let mut config = Self::defaults(kind);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "kind") {
            config.set(k, v)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path, fallback: Option<ExperimentKind>) -> Result<Self> {
        Self::from_ini_str(&std::fs::read_to_string(path)?, fallback)
    }

    /// Override one field by the name used in config files and CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "s" => self.s = parse_list(key, value)?,
            "gamma" => self.gamma = parse_one(key, value)?,
            "T" => self.final_time = parse_one(key, value)?,
            "mu" => self.mu = parse_one(key, value)?,
            "K" => self.steps = parse_list(key, value)?,
            "M" => self.refinements = parse_list(key, value)?,
            "zeta" => self.zeta = Some(parse_one(key, value)?),
            "Y" => self.heights = parse_list(key, value)?,
            "tol" => self.tol = parse_one(key, value)?,
            "max_iter" => self.max_iter = parse_one(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.is_empty() || self.steps.is_empty() || self.refinements.is_empty() {
            return Err(Error::Config("s, K and M lists must be nonempty".into()));
        }
        if self.kind == ExperimentKind::Truncation && self.heights.len() < FIT_LEVELS + 1 {
            return Err(Error::Config(format!(
                "truncation study needs at least {} heights",
                FIT_LEVELS + 1
            )));
        }
        for &s in &self.s {
            FractionalParams::new(s, self.gamma, self.heights.first().copied().unwrap_or(1.0))?;
        }
        for &y in &self.heights {
            FractionalParams::new(self.s[0], self.gamma, y)?;
        }
        ControlBounds::new(0.0, 0.5, self.mu)?;
        for &k in &self.steps {
            TimeGrid::new(self.final_time, k)?;
        }
        for &m in &self.refinements {
            if m < 2 {
                return Err(Error::Config(format!("M = {m} leaves no interior vertices")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol = {} must be positive", self.tol)));
        }
        Ok(())
    }

    pub fn bfgs_options(&self) -> BfgsOptions {
        BfgsOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ..BfgsOptions::default()
        }
    }

    fn height(&self) -> Option<f64> {
        self.heights.first().copied()
    }
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse_one(key, v))
        .collect()
}

/// One discretization of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub case: String,
    pub s: f64,
    pub gamma: f64,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub zeta: f64,
    pub y: f64,
    pub err_control: f64,
    pub err_state: f64,
    pub cost: f64,
    pub iters: usize,
    pub pg_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub case: String,
    pub s: f64,
    pub gamma: f64,
    pub quantity: String,
    pub slope: f64,
    pub levels_used: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
    pub rates: Vec<RateRow>,
}

/// Twelve significant digits.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.11e}")
    } else {
        format!("{v}")
    }
}

impl ConvergenceReport {
    pub fn rate(&self, s: f64, quantity: &str) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| r.s == s && r.quantity == quantity)
            .map(|r| r.slope)
    }

    pub fn rows_for(&self, s: f64) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.s == s)
    }

    /// Write `report.csv` and `rates.csv` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.case.clone(),
                format_number(r.s),
                format_number(r.gamma),
                r.m.to_string(),
                r.k.to_string(),
                r.n.to_string(),
                format_number(r.zeta),
                format_number(r.y),
                format_number(r.err_control),
                format_number(r.err_state),
                format_number(r.cost),
                r.iters.to_string(),
                format_number(r.pg_norm),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("rates.csv"))?;
        w.write_record(RATES_HEADER)?;
        for r in &self.rates {
            w.write_record([
                r.case.clone(),
                format_number(r.s),
                format_number(r.gamma),
                r.quantity.clone(),
                format_number(r.slope),
                r.levels_used.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("report.csv"))?;
        check_header(r.headers()?, &REPORT_HEADER)?;
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| parse_one::<f64>(REPORT_HEADER[i], &rec[i]);
            let u = |i: usize| parse_one::<usize>(REPORT_HEADER[i], &rec[i]);
            rows.push(ReportRow {
                case: rec[0].to_string(),
                s: f(1)?,
                gamma: f(2)?,
                m: u(3)?,
                k: u(4)?,
                n: u(5)?,
                zeta: f(6)?,
                y: f(7)?,
                err_control: f(8)?,
                err_state: f(9)?,
                cost: f(10)?,
                iters: u(11)?,
                pg_norm: f(12)?,
            });
        }
        let mut rates = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("rates.csv"))?;
        check_header(r.headers()?, &RATES_HEADER)?;
        for rec in r.records() {
            let rec = rec?;
            rates.push(RateRow {
                case: rec[0].to_string(),
                s: parse_one("s", &rec[1])?,
                gamma: parse_one("gamma", &rec[2])?,
                quantity: rec[3].to_string(),
                slope: parse_one("slope", &rec[4])?,
                levels_used: parse_one("levels_used", &rec[5])?,
            });
        }
        Ok(Self { rows, rates })
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Config(format!("unexpected CSV header {found:?}")));
    }
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_fit(xs, ys)?;
    if let Some(v) = xs.iter().chain(ys).find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositive(format!("{v}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(slope(&lx, &ly))
}

/// Least-squares slope of `log y` against `x`.
pub fn fit_exponential(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_fit(xs, ys)?;
    if let Some(v) = ys.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositive(format!("{v}")));
    }
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(slope(xs, &ly))
}

fn check_fit(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!("{} abscissae, {} values", xs.len(), ys.len())));
    }
    if xs.len() < FIT_LEVELS {
        return Err(Error::Config(format!("slope fit needs {FIT_LEVELS} points, got {}", xs.len())));
    }
    Ok(())
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `‖v − u‖_{L²(Ω)}` for a Q1 trace `v`, by the three-point tensor rule.
pub fn trace_error(omega: &OmegaMesh, trace: &[f64], exact: &(dyn Fn(&[f64]) -> f64 + '_)) -> Result<f64> {
    if trace.len() != omega.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "trace of length {} on {} vertices",
            trace.len(),
            omega.n_vertices()
        )));
    }
    let dim = omega.dim();
    let rule = cell_rule(dim);
    let vol = omega.cell_volume();
    let nv = omega.vertices_per_cell();
    let mut sum = 0.0;
    for c in 0..omega.n_cells() {
        let verts = omega.cell_vertices(c);
        for &(reference, w) in &rule {
            let phi = omega.shape_values(reference);
            let vh: f64 = (0..nv).map(|a| phi[a] * trace[verts[a]]).sum();
            let x = omega.map_to_cell(c, reference);
            sum += w * vol * (vh - exact(&x[..dim])).powi(2);
        }
    }
    Ok(sum.sqrt())
}

/// `(Σ_k τ ‖V^k − u(t_k)‖²)^{1/2}` over `k = 1..=K` for Q1 traces `V^0..V^K`.
pub fn l2q_state_error(omega: &OmegaMesh, grid: &TimeGrid, traces: &[Vec<f64>], exact: &Exact) -> Result<f64> {
    if traces.len() != grid.steps + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} traces for {} steps",
            traces.len(),
            grid.steps
        )));
    }
    let mut sum = 0.0;
    for (k, trace) in traces.iter().enumerate().skip(1) {
        let t = grid.node(k);
        sum += grid.tau * trace_error(omega, trace, &|x| exact(x, t))?.powi(2);
    }
    Ok(sum.sqrt())
}

/// `(Σ_k τ ‖Z^k − z(t_k)‖²)^{1/2}` for a cellwise constant control.
pub fn l2q_control_error(control: &ControlField, exact: &Exact) -> Result<f64> {
    let omega = control.omega();
    let grid = control.grid();
    let dim = omega.dim();
    let rule = cell_rule(dim);
    let vol = omega.cell_volume();
    let mut sum = 0.0;
    for k in 1..=grid.steps {
        let t = grid.node(k);
        for (c, &zc) in control.step(k).iter().enumerate() {
            for &(reference, w) in &rule {
                let x = omega.map_to_cell(c, reference);
                sum += grid.tau * w * vol * (zc - exact(&x[..dim], t)).powi(2);
            }
        }
    }
    Ok(sum.sqrt())
}

/// `(Σ_k τ ‖a^k − b^k‖²)^{1/2}` for two trace histories on the same mesh.
pub fn trace_history_distance(omega: &OmegaMesh, grid: &TimeGrid, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != grid.steps + 1 || b.len() != grid.steps + 1 {
        return Err(Error::DimensionMismatch("trace histories of different lengths".into()));
    }
    let mass = omega_mass(omega);
    let mut sum = 0.0;
    for (va, vb) in a.iter().zip(b).skip(1) {
        let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        sum += grid.tau * mass.bilinear(&d, &d);
    }
    Ok(sum.sqrt())
}

/// Mesh, orders and time grid of one run.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub params: FractionalParams,
    pub mesh: CylinderMesh,
    pub grid: TimeGrid,
    pub n: usize,
    pub zeta: f64,
}

/// Uniform Ω mesh with `m` cells per dimension and a graded axis of `m`
/// intervals; height and grading default to [`select_truncation`] and
/// [`default_zeta`].
#[allow(clippy::too_many_arguments)]
pub fn discretize(
    dim: usize,
    s: f64,
    gamma: f64,
    m: usize,
    steps: usize,
    final_time: f64,
    zeta: Option<f64>,
    height: Option<f64>,
) -> Result<Discretization> {
    let n = free_node_count(dim, m, m);
    let height = height.unwrap_or_else(|| select_truncation(n, s, dim));
    let params = FractionalParams::new(s, gamma, height)?;
    let zeta = zeta.unwrap_or_else(|| default_zeta(params.alpha));
    let axis = graded_axis(m, height, zeta)?;
    let mesh = build_cylinder(OmegaMesh::unit(dim, m)?, axis);
    Ok(Discretization {
        params,
        n: mesh.n_free(),
        mesh,
        grid: TimeGrid::new(final_time, steps)?,
        zeta,
    })
}

impl Discretization {
    fn row(&self, case: &str, m: usize) -> ReportRow {
        ReportRow {
            case: case.to_string(),
            s: self.params.s,
            gamma: self.params.gamma,
            m,
            k: self.grid.steps,
            n: self.n,
            zeta: self.zeta,
            y: self.params.truncation_height,
            err_control: f64::NAN,
            err_state: f64::NAN,
            cost: f64::NAN,
            iters: 0,
            pg_norm: f64::NAN,
        }
    }
}

/// Optimal control of the manufactured problem on one discretization.
#[derive(Clone, Debug)]
pub struct ControlCase {
    pub row: ReportRow,
    pub converged: bool,
    /// `‖Z − clamp(−Π tr P / μ)‖` at the returned control.
    pub vi_residual: f64,
    pub solution: ControlSolution,
}

/// Solve the manufactured control problem of order `(s, γ)` from the zero
/// control and measure the errors against its exact optimal pair.
pub fn manufactured_case(case: &str, config: &ExperimentConfig, s: f64, m: usize, steps: usize) -> Result<ControlCase> {
    let exact = fractional_manufactured_problem(s, config.gamma, config.mu, config.final_time)?;
    let disc = discretize(2, s, config.gamma, m, steps, config.final_time, config.zeta, config.height())?;
    let omega = disc.mesh.omega().clone();
    let problem = ReducedProblem::new(exact.problem_data()?, disc.params, disc.mesh.clone(), disc.grid)?;
    let solution = solve_control(&problem, &problem.zero_control(), &config.bfgs_options())?;
    let residual = vi_residual(&solution.control, &adjoint_means(&omega, &solution.adjoint));
    let mut row = disc.row(case, m);
    row.err_control = l2q_control_error(&solution.control, exact.control.as_ref())?;
    row.err_state = l2q_state_error(&omega, &disc.grid, &solution.state.traces, exact.state.as_ref())?;
    row.cost = solution.cost;
    row.iters = solution.iterations;
    row.pg_norm = solution.pg_norm();
    Ok(ControlCase {
        row,
        converged: solution.converged,
        vi_residual: residual,
        solution,
    })
}

/// State of the manufactured problem driven by the projection of the
/// exact optimal control.
pub fn manufactured_state_case(config: &ExperimentConfig, s: f64, m: usize, steps: usize) -> Result<ReportRow> {
    let exact = fractional_manufactured_problem(s, config.gamma, config.mu, config.final_time)?;
    let disc = discretize(2, s, config.gamma, m, steps, config.final_time, config.zeta, config.height())?;
    let omega = disc.mesh.omega().clone();
    let data = exact.problem_data()?;
    let z = l2_project(exact.control.as_ref(), &disc.grid, &omega, exact.bounds)?;
    let state = solve_state(&data, &disc.params, &disc.mesh, &disc.grid, &z)?;
    let problem = ReducedProblem::new(data, disc.params, disc.mesh.clone(), disc.grid)?;
    let mut row = disc.row(ExperimentKind::SolveState.name(), m);
    row.err_control = l2q_control_error(&z, exact.control.as_ref())?;
    row.err_state = l2q_state_error(&omega, &disc.grid, &state.traces, exact.state.as_ref())?;
    row.cost = problem.cost_of_state(&state, &z);
    Ok(row)
}

/// Free decay of the first eigenfunction compared with its closed form at `T`.
pub fn oracle_case(config: &ExperimentConfig, s: f64, m: usize, steps: usize) -> Result<ReportRow> {
    let disc = discretize(2, s, config.gamma, m, steps, config.final_time, config.zeta, config.height())?;
    let mode = SpectralMode::two(1, 1);
    let data = single_mode_data(mode, config.mu)?;
    let omega = disc.mesh.omega().clone();
    let z = ControlField::zeros(omega.clone(), disc.grid, data.bounds);
    let state = solve_state(&data, &disc.params, &disc.mesh, &disc.grid, &z)?;
    let reference = spectral_solve_state(&data, config.gamma, s, &disc.grid)?;
    let last = disc.grid.steps;
    let mut row = disc.row(ExperimentKind::OracleCheck.name(), m);
    row.err_state = trace_error(&omega, &state.traces[last], &|x| modal_value(&reference, last, x))?;
    Ok(row)
}

fn single_mode_data(mode: SpectralMode, mu: f64) -> Result<ProblemData> {
    let bounds = ControlBounds::new(0.0, 0.5, mu)?;
    let mut data = ProblemData::homogeneous(2, bounds)?;
    data.initial = Arc::new(move |x: &[f64]| mode.eval(x));
    Ok(data.with_spectral(SpectralData {
        terms: vec![ModalTerm {
            mode,
            initial: 1.0,
            forcing: ModalForcing::Zero,
        }],
    }))
}

/// Run the experiment named by `config.kind`, reporting each row as it
/// completes.
pub fn run(config: &ExperimentConfig, on_row: &mut dyn FnMut(&ReportRow)) -> Result<ConvergenceReport> {
    config.validate()?;
    match config.kind {
        ExperimentKind::SolveState => {
            let mut report = ConvergenceReport::default();
            for &s in &config.s {
                let row = manufactured_state_case(config, s, config.refinements[0], config.steps[0])?;
                on_row(&row);
                report.rows.push(row);
            }
            Ok(report)
        }
        ExperimentKind::SolveControl => {
            let mut report = ConvergenceReport::default();
            for &s in &config.s {
                let case = manufactured_case(config.kind.name(), config, s, config.refinements[0], config.steps[0])?;
                on_row(&case.row);
                report.rows.push(case.row);
            }
            Ok(report)
        }
        ExperimentKind::ConvergenceSpace => run_convergence_space(config, on_row),
        ExperimentKind::ConvergenceTime => run_convergence_time(config, on_row),
        ExperimentKind::Truncation => run_truncation_study(config, on_row),
        ExperimentKind::OracleCheck => run_oracle_check(config, on_row),
    }
}

/// Control and state errors over the `M` list at fixed `K`, with slopes
/// against `N`.
pub fn run_convergence_space(config: &ExperimentConfig, on_row: &mut dyn FnMut(&ReportRow)) -> Result<ConvergenceReport> {
    let mut report = ConvergenceReport::default();
    let steps = config.steps[0];
    for &s in &config.s {
        let mut fitted = Vec::new();
        for &m in &config.refinements {
            let case = manufactured_case(ExperimentKind::ConvergenceSpace.name(), config, s, m, steps)?;
            on_row(&case.row);
            if case.converged {
                fitted.push(case.row.clone());
            }
            report.rows.push(case.row);
        }
        push_rates(&mut report, ExperimentKind::ConvergenceSpace, s, config.gamma, &fitted, |r| r.n as f64);
    }
    Ok(report)
}

/// Control and state errors over the `K` list at fixed `M`, with slopes
/// against `K`.
pub fn run_convergence_time(config: &ExperimentConfig, on_row: &mut dyn FnMut(&ReportRow)) -> Result<ConvergenceReport> {
    let mut report = ConvergenceReport::default();
    let m = config.refinements[0];
    for &s in &config.s {
        let mut fitted = Vec::new();
        for &k in &config.steps {
            let case = manufactured_case(ExperimentKind::ConvergenceTime.name(), config, s, m, k)?;
            on_row(&case.row);
            if case.converged {
                fitted.push(case.row.clone());
            }
            report.rows.push(case.row);
        }
        push_rates(&mut report, ExperimentKind::ConvergenceTime, s, config.gamma, &fitted, |r| r.k as f64);
    }
    Ok(report)
}

fn push_rates(
    report: &mut ConvergenceReport,
    kind: ExperimentKind,
    s: f64,
    gamma: f64,
    rows: &[ReportRow],
    abscissa: impl Fn(&ReportRow) -> f64,
) {
    let tail = &rows[rows.len().saturating_sub(FIT_LEVELS)..];
    let xs: Vec<f64> = tail.iter().map(&abscissa).collect();
    for (quantity, value) in [
        ("control", (|r: &ReportRow| r.err_control) as fn(&ReportRow) -> f64),
        ("state", |r: &ReportRow| r.err_state),
    ] {
        let ys: Vec<f64> = tail.iter().map(value).collect();
        // too few converged levels or a zero error: no rate for this quantity
        if let Ok(slope) = fit_rate(&xs, &ys) {
            report.rates.push(RateRow {
                case: kind.name().to_string(),
                s,
                gamma,
                quantity: quantity.to_string(),
                slope,
                levels_used: tail.len(),
            });
        }
    }
}

/// Distance of the state trace at each height `Y` from the one at the
/// largest height, for `u0 = sin(πx₁) sin(πx₂)`, `f = z = 0`.
///
/// All heights share one graded part of height `min Y` continued by a
/// uniform tail, so the meshes are nested and the distances isolate the
/// truncation.
pub fn run_truncation_study(config: &ExperimentConfig, on_row: &mut dyn FnMut(&ReportRow)) -> Result<ConvergenceReport> {
    let s = config.s[0];
    let m = config.refinements[0];
    let grid = TimeGrid::new(config.final_time, config.steps[0])?;
    let mut heights = config.heights.clone();
    heights.sort_by(f64::total_cmp);
    heights.dedup();
    let y_min = heights[0];
    let alpha = 1.0 - 2.0 * s;
    let zeta = config.zeta.unwrap_or_else(|| default_zeta(alpha));
    let graded = graded_axis(m, y_min, zeta)?;
    let last = *graded.interval_lengths().last().ok_or(Error::EmptyMesh)?;
    let gap = heights
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let spacing = gap / (gap / last).ceil();
    let omega = OmegaMesh::unit(2, m)?;
    let data = single_mode_data(SpectralMode::two(1, 1), config.mu)?;

    let mut traces = Vec::with_capacity(heights.len());
    let mut sizes = Vec::with_capacity(heights.len());
    for &y in &heights {
        let axis = graded.with_uniform_tail(y, spacing)?;
        let mesh = build_cylinder(omega.clone(), axis);
        sizes.push(mesh.n_free());
        let params = FractionalParams::new(s, config.gamma, y)?;
        let z = ControlField::zeros(omega.clone(), grid, data.bounds);
        traces.push(solve_state(&data, &params, &mesh, &grid, &z)?.traces);
    }

    let reference = traces.last().expect("nonempty heights");
    let mut report = ConvergenceReport::default();
    for (i, &y) in heights[..heights.len() - 1].iter().enumerate() {
        let row = ReportRow {
            case: ExperimentKind::Truncation.name().to_string(),
            s,
            gamma: config.gamma,
            m,
            k: grid.steps,
            n: sizes[i],
            zeta,
            y,
            err_control: f64::NAN,
            err_state: trace_history_distance(&omega, &grid, &traces[i], reference)?,
            cost: f64::NAN,
            iters: 0,
            pg_norm: f64::NAN,
        };
        on_row(&row);
        report.rows.push(row);
    }
    let xs: Vec<f64> = report.rows.iter().map(|r| r.y).collect();
    let ys: Vec<f64> = report.rows.iter().map(|r| r.err_state).collect();
    report.rates.push(RateRow {
        case: ExperimentKind::Truncation.name().to_string(),
        s,
        gamma: config.gamma,
        quantity: "exp_decay".to_string(),
        slope: fit_exponential(&xs, &ys)?,
        levels_used: xs.len(),
    });
    Ok(report)
}

/// Predicted exponential decay rate `−√λ₁ / 2` of the truncation error
/// on the unit cube of dimension `dim`.
pub fn truncation_rate(dim: usize) -> f64 {
    -(dim as f64 * PI * PI).sqrt() / 2.0
}

/// Trace error at `T` of the free decay of the first eigenfunction over
/// the `M` list, for every `s`.
pub fn run_oracle_check(config: &ExperimentConfig, on_row: &mut dyn FnMut(&ReportRow)) -> Result<ConvergenceReport> {
    let mut report = ConvergenceReport::default();
    let steps = config.steps[0];
    for &s in &config.s {
        let mut rows = Vec::new();
        for &m in &config.refinements {
            let row = oracle_case(config, s, m, steps)?;
            on_row(&row);
            rows.push(row);
        }
        let tail = &rows[rows.len().saturating_sub(FIT_LEVELS)..];
        let xs: Vec<f64> = tail.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = tail.iter().map(|r| r.err_state).collect();
        if let Ok(slope) = fit_rate(&xs, &ys) {
            report.rates.push(RateRow {
                case: ExperimentKind::OracleCheck.name().to_string(),
                s,
                gamma: config.gamma,
                quantity: "state".to_string(),
                slope,
                levels_used: tail.len(),
            });
        }
        report.rows.extend(rows);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_report() -> ConvergenceReport {
        ConvergenceReport {
            rows: vec![
                ReportRow {
                    case: "conv-space".into(),
                    s: 0.2,
                    gamma: 1.0,
                    m: 4,
                    k: 64,
                    n: 36,
                    zeta: 1.05 * 3.0 / 0.4,
                    y: 1.0,
                    err_control: 0.123_456_789_012_345,
                    err_state: 1.0 / 3.0,
                    cost: -PI,
                    iters: 17,
                    pg_norm: 7.5e-10,
                },
                ReportRow {
                    case: "truncation".into(),
                    s: 0.5,
                    gamma: 0.5,
                    m: 8,
                    k: 16,
                    n: 441,
                    zeta: 3.15,
                    y: 2.5,
                    err_control: f64::NAN,
                    err_state: 2.0f64.sqrt() * 1e-9,
                    cost: f64::NAN,
                    iters: 0,
                    pg_norm: f64::NAN,
                },
            ],
            rates: vec![RateRow {
                case: "conv-space".into(),
                s: 0.2,
                gamma: 1.0,
                quantity: "control".into(),
                slope: -1.0 / 3.0,
                levels_used: 3,
            }],
        }
    }

    fn same(a: f64, b: f64) -> bool {
        a == b || (a.is_nan() && b.is_nan())
    }

    #[test]
    fn csv_round_trip_is_exact_after_one_pass() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        report.write(dir.path()).unwrap();
        let once = ConvergenceReport::read(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        once.write(dir.path()).unwrap();
        let twice = ConvergenceReport::read(dir.path()).unwrap();
        assert_eq!(text, std::fs::read_to_string(dir.path().join("report.csv")).unwrap());
        for (a, b) in once.rows.iter().zip(&twice.rows) {
            assert_eq!(a.case, b.case);
            assert_eq!((a.m, a.k, a.n, a.iters), (b.m, b.k, b.n, b.iters));
            for (x, y) in [
                (a.s, b.s),
                (a.err_control, b.err_control),
                (a.err_state, b.err_state),
                (a.cost, b.cost),
                (a.pg_norm, b.pg_norm),
            ] {
                assert!(same(x, y));
            }
        }
        assert_eq!(once.rates, twice.rates);
        for (orig, read) in report.rows.iter().zip(&once.rows) {
            assert!(same(orig.s, read.s) && orig.m == read.m);
            if orig.err_state.is_finite() {
                assert!((orig.err_state - read.err_state).abs() <= 1e-11 * orig.err_state.abs());
            }
        }
    }

    #[test]
    fn numbers_have_twelve_significant_digits() {
        assert_eq!(format_number(1.0 / 3.0), "3.33333333333e-1");
        assert_eq!(format_number(f64::NAN), "NaN");
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        sample_report().write(dir.path()).unwrap();
        std::fs::write(dir.path().join("rates.csv"), "case,s\nx,1\n").unwrap();
        assert!(ConvergenceReport::read(dir.path()).is_err());
    }

    #[test]
    fn fit_rate_exact_powers() {
        let xs = [10.0, 20.0, 40.0, 80.0];
        let inv: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
        assert!((fit_rate(&xs, &inv).unwrap() + 1.0).abs() < 1e-12);
        let cube: Vec<f64> = xs.iter().map(|x| 3.7 * x.powf(-1.0 / 3.0)).collect();
        assert!((fit_rate(&xs, &cube).unwrap() + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_tolerates_five_percent_noise() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let xs: Vec<f64> = (0..8).map(|i| 100.0 * 2f64.powi(i)).collect();
        for _ in 0..50 {
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| x.powf(-2.0 / 3.0) * (1.0 + rng.random_range(-0.05..0.05)))
                .collect();
            assert!((fit_rate(&xs, &ys).unwrap() + 2.0 / 3.0).abs() <= 0.05);
        }
    }

    #[test]
    fn fit_rate_rejects_bad_input() {
        assert!(matches!(fit_rate(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]), Err(Error::NonPositive(_))));
        assert!(matches!(fit_rate(&[1.0, -2.0, 3.0], &[1.0, 1.0, 1.0]), Err(Error::NonPositive(_))));
        assert!(fit_rate(&[1.0, 2.0], &[1.0, 0.5]).is_err());
        assert!(fit_rate(&[1.0, 2.0, 3.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn fit_exponential_recovers_decay() {
        let xs = [1.0f64, 1.5, 2.0, 2.5];
        let ys: Vec<f64> = xs.iter().map(|y| 0.3 * (-2.2 * y).exp()).collect();
        assert!((fit_exponential(&xs, &ys).unwrap() + 2.2).abs() < 1e-12);
    }

    #[test]
    fn bilinear_functions_have_zero_error() {
        let omega = OmegaMesh::unit(2, 5).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let u = |x: &[f64], t: f64| (1.0 + t) * (0.3 + x[0] - 2.0 * x[1] + 1.5 * x[0] * x[1]);
        let traces: Vec<Vec<f64>> = (0..=4)
            .map(|k| {
                (0..omega.n_vertices())
                    .map(|v| u(&omega.vertex_point(v), grid.node(k)))
                    .collect()
            })
            .collect();
        assert!(l2q_state_error(&omega, &grid, &traces, &u).unwrap() < 1e-12);
    }

    #[test]
    fn zero_state_error_against_eigenmode() {
        let omega = OmegaMesh::unit(2, 8).unwrap();
        let phi = |x: &[f64], t: f64| t.exp() * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin();
        let limit = 0.25 * (std::f64::consts::E.powi(2) - 1.0) / 2.0;
        let mut previous = f64::INFINITY;
        for steps in [16, 64, 256] {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let zeros = vec![vec![0.0; omega.n_vertices()]; steps + 1];
            let err2 = l2q_state_error(&omega, &grid, &zeros, &phi).unwrap().powi(2);
            // right-endpoint sums of e^{2t}/4 with the 3-point rule per cell
            let expected: f64 = (1..=steps)
                .map(|k| {
                    let t = grid.node(k);
                    grid.tau * 0.25 * (2.0 * t).exp()
                })
                .sum();
            assert!((err2 - expected).abs() < 2e-3 * expected, "{err2} vs {expected}");
            assert!((err2 - limit).abs() < previous);
            previous = (err2 - limit).abs();
        }
    }

    #[test]
    fn l2q_triangle_inequality() {
        let omega = OmegaMesh::unit(2, 4).unwrap();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mut random = || -> Vec<Vec<f64>> {
            (0..=3)
                .map(|_| (0..omega.n_vertices()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let zero = |_: &[f64], _: f64| 0.0;
        for _ in 0..20 {
            let (a, b, c) = (random(), random(), random());
            let d = |p: &[Vec<f64>], q: &[Vec<f64>]| {
                let diff: Vec<Vec<f64>> = p
                    .iter()
                    .zip(q)
                    .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect())
                    .collect();
                l2q_state_error(&omega, &grid, &diff, &zero).unwrap()
            };
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-14);
            // mass-matrix distance is the same norm
            assert!((d(&a, &b) - trace_history_distance(&omega, &grid, &a, &b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn control_error_of_exact_constant_is_zero() {
        let omega = OmegaMesh::unit(2, 3).unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let bounds = ControlBounds::new(0.0, 0.5, 1.0).unwrap();
        let z = ControlField::constant(omega, grid, bounds, 0.25);
        assert!(l2q_control_error(&z, &|_, _| 0.25).unwrap() < 1e-15);
        assert!((l2q_control_error(&z, &|_, _| 0.0).unwrap() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn config_from_ini_with_overrides() {
        let text = "[experiment]\nkind = conv-space\n\n[parameters]\ns = 0.3, 0.7\nK = 32\nM = 4,8\nmu = 0.5\n";
        let mut cfg = ExperimentConfig::from_ini_str(text, None).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::ConvergenceSpace);
        assert_eq!(cfg.s, vec![0.3, 0.7]);
        assert_eq!(cfg.steps, vec![32]);
        assert_eq!(cfg.refinements, vec![4, 8]);
        assert_eq!(cfg.mu, 0.5);
        assert_eq!(cfg.gamma, 1.0);
        cfg.set("gamma", "0.5").unwrap();
        cfg.set("Y", "2").unwrap();
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.heights, vec![2.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::from_ini_str("s = 0.5\n", None).is_err());
        assert!(ExperimentConfig::from_ini_str("kind = truncation\n", Some(ExperimentKind::OracleCheck)).is_err());
        assert!(ExperimentConfig::from_ini_str("kind = nope\n", None).is_err());
        assert!(ExperimentConfig::from_ini_str("bogus = 1\n", Some(ExperimentKind::SolveState)).is_err());
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::SolveState);
        cfg.s = vec![1.2];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Truncation);
        cfg.heights = vec![1.0, 2.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::ConvergenceSpace);
        cfg.refinements.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kinds_parse_their_names() {
        for kind in [
            ExperimentKind::SolveState,
            ExperimentKind::SolveControl,
            ExperimentKind::ConvergenceSpace,
            ExperimentKind::ConvergenceTime,
            ExperimentKind::Truncation,
            ExperimentKind::OracleCheck,
        ] {
            assert_eq!(kind.name().parse::<ExperimentKind>().unwrap(), kind);
            ExperimentConfig::defaults(kind).validate().unwrap();
        }
    }

    #[test]
    fn small_runs_are_deterministic() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::SolveControl);
        cfg.refinements = vec![4];
        cfg.steps = vec![4];
        let a = run(&cfg, &mut |_| {}).unwrap();
        let b = run(&cfg, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert!(a.rows[0].pg_norm <= cfg.tol);
    }
}
