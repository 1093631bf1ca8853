//! Experiment orchestration: configuration, the weak-order study, order
//! fitting, and CSV report output.
//!
//! The weak-order study measures `|E phi(X^eps_T) - E phi(Xbar_T)|` across a
//! decreasing grid of scale parameters.  In `gaussian` mode both expectations
//! come from the moment oracle (deterministic, LINEAR models only); in `mc`
//! mode they are Monte-Carlo means over coupled samples whose averaged
//! partner shares the slow-noise stream draw for draw, so the per-sample
//! difference has small variance and its standard error gates the regression
//! rows.  All sample reductions run over fixed-size index chunks merged in
//! order, which makes every output byte-identical across worker counts.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{
    estimate_fbar_ergodic, fit_exponential_decay, mixing_gap_curve, DecayFit, ErgodicFbar,
    ErgodicParams, GapPoint,
};
use crate::error::{Result, SimError};
use crate::integrators::{
    simulate_coupled_averaged_pair, simulate_pair_with_fbar, simulate_terminal, SimKind, SimParams,
};
use crate::models::{fbar_closed_form, require_valid, HypothesisReport, ModelSpec, TestFunction};
use crate::noise::StreamFamily;
use crate::oracle::{
    gaussian_moments_averaged, gaussian_moments_coupled, weak_value_gaussian,
    DEFAULT_ODE_RESOLUTION,
};
use crate::spectral::SpectralField;

const CHUNK: usize = 256;

/// Threshold below which a weak error counts as numerically zero (the
/// degenerate case `F == Fbar`).
const DEGENERATE_ZERO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Mc,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiFamily {
    Cosine,
    Rational,
}

/// Serializable test-function choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    pub family: PhiFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

/// Full experiment description, the unit of the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config schema version; currently 1.
    pub version: u32,
    pub model: ModelSpec,
    pub sim: SimParams,
    /// Scale parameters for the weak-order and expansion studies, strictly
    /// decreasing, all in (0, 1].
    #[serde(default)]
    pub eps_grid: Vec<f64>,
    pub mode: RunMode,
    pub phi: PhiSpec,
    /// Initial slow field (mode coefficients, length `sim.n_modes`).
    pub x0: Vec<f64>,
    /// Initial fast field.
    pub y0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        Ok(config)
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validate everything an experiment needs; returns the hypothesis
    /// report for downstream constants.
    pub fn validate(&self) -> Result<HypothesisReport> {
        if self.version != 1 {
            return Err(SimError::Config(format!(
                "unsupported config version {} (expected 1)",
                self.version
            )));
        }
        self.sim.validate()?;
        let n = self.sim.n_modes;
        if self.x0.len() != n || self.y0.len() != n {
            return Err(SimError::Config(format!(
                "x0/y0 must have length n_modes = {n} (got {} / {})",
                self.x0.len(),
                self.y0.len()
            )));
        }
        if !self.eps_grid.is_empty() {
            for w in self.eps_grid.windows(2) {
                if !(w[1] < w[0]) {
                    return Err(SimError::Config(
                        "eps_grid must be strictly decreasing".into(),
                    ));
                }
            }
            if self.eps_grid.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
                return Err(SimError::Config(
                    "eps_grid entries must lie in (0, 1]".into(),
                ));
            }
        }
        if self.mode == RunMode::Gaussian && !self.model.is_linear() {
            return Err(SimError::Config(
                "gaussian mode requires the LINEAR drift family".into(),
            ));
        }
        if self.phi.family == PhiFamily::Cosine {
            match &self.phi.direction {
                Some(v) if v.len() == n => {}
                Some(v) => {
                    return Err(SimError::Config(format!(
                        "phi direction must have length n_modes = {n} (got {})",
                        v.len()
                    )))
                }
                None => {
                    return Err(SimError::Config(
                        "cosine test function needs a direction".into(),
                    ))
                }
            }
        }
        require_valid(&self.model, n)
    }

    pub fn x0_field(&self) -> Result<SpectralField> {
        SpectralField::new(self.x0.clone(), self.model.length_l)
    }

    pub fn y0_field(&self) -> Result<SpectralField> {
        SpectralField::new(self.y0.clone(), self.model.length_l)
    }

    pub fn test_function(&self) -> Result<TestFunction> {
        match self.phi.family {
            PhiFamily::Cosine => {
                let v = self.phi.direction.clone().ok_or_else(|| {
                    SimError::Config("cosine test function needs a direction".into())
                })?;
                Ok(TestFunction::cosine(SpectralField::new(
                    v,
                    self.model.length_l,
                )?))
            }
            PhiFamily::Rational => Ok(TestFunction::Rational),
        }
    }

    pub fn stream_family(&self) -> StreamFamily {
        StreamFamily::new(self.sim.seed)
    }
}

/// One measured row of the weak-order study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeakOrderRow {
    pub eps: f64,
    pub weak_err: f64,
    pub stderr: f64,
}

/// Least-squares order fit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub mode: RunMode,
    pub n_modes: usize,
    pub n_samples: usize,
    pub t_horizon: f64,
    pub wall_ms: u128,
}

/// Result of the weak-order study.
#[derive(Debug, Clone, Serialize)]
pub struct WeakOrderReport {
    pub rows: Vec<WeakOrderRow>,
    pub fitted_order: Option<OrderFit>,
    pub flags: Vec<String>,
    pub meta: ReportMeta,
}

impl WeakOrderReport {
    /// No usable regression rows: the study cannot distinguish the weak
    /// error from noise (or it is identically zero).
    pub fn inconclusive(&self) -> bool {
        self.fitted_order.is_none()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,weak_err,stderr\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_g17(row.eps),
                fmt_g17(row.weak_err),
                fmt_g17(row.stderr)
            ));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        match &self.fitted_order {
            Some(fit) => format!(
                "order={:.2} ({:.2}) rows={} flags=[{}]",
                fit.slope,
                fit.stderr,
                self.rows.len(),
                self.flags.join(",")
            ),
            None => format!(
                "order=n/a rows={} flags=[{}]",
                self.rows.len(),
                self.flags.join(",")
            ),
        }
    }
}

/// 17-significant-digit decimal formatting; round-trips f64 exactly.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Log-log least-squares slope of `err` against `eps`, with the regression
/// standard error of the slope.  Needs at least 3 rows with positive errors.
pub fn fit_order(rows: &[(f64, f64)]) -> Result<OrderFit> {
    let usable: Vec<&(f64, f64)> = rows
        .iter()
        .filter(|(e, err)| *e > 0.0 && *err > 0.0)
        .collect();
    if usable.len() < 3 {
        return Err(SimError::EstimationFailure(format!(
            "order fit needs at least 3 usable rows, got {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (e, err) in &usable {
        let (lx, ly) = (e.ln(), err.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(SimError::EstimationFailure("degenerate eps grid".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let icept = (sy - slope * sx) / n;
    let mut ssr = 0.0;
    for (e, err) in &usable {
        let r = err.ln() - (icept + slope * e.ln());
        ssr += r * r;
    }
    let stderr = if usable.len() > 2 {
        (ssr / (n - 2.0) / (sxx - sx * sx / n)).sqrt()
    } else {
        0.0
    };
    Ok(OrderFit { slope, stderr })
}

/// Run the weak-order study described by `config`.
pub fn run_weak_order(config: &ExperimentConfig) -> Result<WeakOrderReport> {
    let start = Instant::now();
    config.validate()?;
    if config.eps_grid.is_empty() {
        return Err(SimError::Config(
            "weak-order study needs a nonempty eps_grid".into(),
        ));
    }
    let x0 = config.x0_field()?;
    let y0 = config.y0_field()?;
    let phi = config.test_function()?;
    let family = config.stream_family();

    let mut flags = Vec::new();
    let rows: Vec<WeakOrderRow> = match config.mode {
        RunMode::Gaussian => {
            let averaged = gaussian_moments_averaged(&config.model, &x0, config.sim.t_horizon)?;
            let ubar = weak_value_gaussian(&averaged, &phi)?;
            config
                .eps_grid
                .par_iter()
                .map(|&eps| -> Result<WeakOrderRow> {
                    let coupled = gaussian_moments_coupled(
                        &config.model,
                        &x0,
                        &y0,
                        eps,
                        config.sim.t_horizon,
                        DEFAULT_ODE_RESOLUTION,
                    )?;
                    let u_eps = weak_value_gaussian(&coupled, &phi)?;
                    Ok(WeakOrderRow {
                        eps,
                        weak_err: (u_eps - ubar).abs(),
                        stderr: 0.0,
                    })
                })
                .collect::<Result<_>>()?
        }
        RunMode::Mc => config
            .eps_grid
            .iter()
            .map(|&eps| mc_weak_error_row(config, &x0, &y0, &phi, &family, eps))
            .collect::<Result<_>>()?,
    };

    let degenerate = rows.iter().all(|r| r.weak_err < DEGENERATE_ZERO);
    if degenerate {
        flags.push("degenerate-zero".into());
    }

    let usable: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| match config.mode {
            RunMode::Gaussian => r.weak_err >= DEGENERATE_ZERO,
            RunMode::Mc => r.weak_err > 5.0 * r.stderr && r.weak_err >= DEGENERATE_ZERO,
        })
        .map(|r| (r.eps, r.weak_err))
        .collect();
    if config.mode == RunMode::Mc && usable.len() < rows.len() {
        flags.push(format!("noise-floor-dropped={}", rows.len() - usable.len()));
    }

    let fitted_order = match fit_order(&usable) {
        Ok(fit) => Some(fit),
        Err(_) => {
            if !degenerate {
                flags.push("inconclusive".into());
            }
            None
        }
    };

    Ok(WeakOrderReport {
        rows,
        fitted_order,
        flags,
        meta: ReportMeta {
            seed: config.sim.seed,
            mode: config.mode,
            n_modes: config.sim.n_modes,
            n_samples: config.sim.n_samples,
            t_horizon: config.sim.t_horizon,
            wall_ms: start.elapsed().as_millis(),
        },
    })
}

fn mc_weak_error_row(
    config: &ExperimentConfig,
    x0: &SpectralField,
    y0: &SpectralField,
    phi: &TestFunction,
    family: &StreamFamily,
    eps: f64,
) -> Result<WeakOrderRow> {
    let params = config.sim.with_epsilon(eps);
    let m = config.sim.n_samples;
    let beta = require_valid(&config.model, config.sim.n_modes)?.beta;
    let chunks = chunk_ranges(m);
    let diffs: Vec<Vec<f64>> = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity((hi - lo) as usize);
            for i in lo..hi {
                let (x_eps, xbar) = if config.model.is_linear() {
                    simulate_coupled_averaged_pair(&config.model, &params, x0, y0, family, i)?
                } else {
                    // no closed-form average: estimate it ergodically per
                    // call, with a per-sample stream family so scheduling
                    // cannot change the draws
                    let mut fbar = ErgodicFbar::new(
                        &config.model,
                        ErgodicParams::from_beta(beta)?,
                        family.child(&format!("fbar-sample-{i}")),
                    );
                    simulate_pair_with_fbar(&config.model, &params, x0, y0, &mut fbar, family, i)?
                };
                out.push(phi.phi_eval(&x_eps)? - phi.phi_eval(&xbar)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = diffs.into_iter().flatten().collect();
    let mf = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / mf;
    let stderr = if diffs.len() > 1 {
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (mf - 1.0);
        (var / mf).sqrt()
    } else {
        0.0
    };
    Ok(WeakOrderRow {
        eps,
        weak_err: mean.abs(),
        stderr,
    })
}

fn chunk_ranges(m: usize) -> Vec<(u64, u64)> {
    let mut chunks = Vec::with_capacity(m / CHUNK + 1);
    let mut lo = 0usize;
    while lo < m {
        let hi = (lo + CHUNK).min(m);
        chunks.push((lo as u64, hi as u64));
        lo = hi;
    }
    chunks
}

/// `simulate` subcommand: one path of the requested kind, terminal field(s)
/// as CSV.  Averaged paths for drift families without a closed-form average
/// estimate it ergodically at every step.
pub fn run_simulate(config: &ExperimentConfig, kind: SimKind) -> Result<String> {
    let report = config.validate()?;
    let x0 = config.x0_field()?;
    let y0 = config.y0_field()?;
    let family = config.stream_family();
    let term = if kind == SimKind::Averaged && !config.model.is_linear() {
        let (steps, h) = crate::integrators::step_grid(config.sim.t_horizon, config.sim.h_macro);
        let mut stepper =
            crate::integrators::AveragedStepper::new(&config.model, config.sim.n_modes, h)?;
        let mut fbar = ErgodicFbar::new(
            &config.model,
            ErgodicParams::from_beta(report.beta)?,
            family.child("simulate-fbar"),
        );
        let mut w1 = family.stream(0, crate::noise::ProcessTag::W1);
        let mut x = x0.clone();
        for _ in 0..steps {
            stepper.step(&mut x, &mut fbar, &mut w1)?;
        }
        crate::integrators::TerminalState {
            x: Some(x),
            y: None,
        }
    } else {
        simulate_terminal(kind, &config.model, &config.sim, &x0, &y0, &family, 0)?
    };
    let mut out = String::new();
    match kind {
        SimKind::Coupled => {
            out.push_str("mode,slow,fast\n");
            let x = term.x.unwrap();
            let y = term.y.unwrap();
            for k in 1..=x.n() {
                out.push_str(&format!(
                    "{k},{},{}\n",
                    fmt_g17(x.coeff(k)),
                    fmt_g17(y.coeff(k))
                ));
            }
        }
        SimKind::Averaged => {
            out.push_str("mode,slow\n");
            let x = term.x.unwrap();
            for k in 1..=x.n() {
                out.push_str(&format!("{k},{}\n", fmt_g17(x.coeff(k))));
            }
        }
        SimKind::Frozen => {
            out.push_str("mode,fast\n");
            let y = term.y.unwrap();
            for k in 1..=y.n() {
                out.push_str(&format!("{k},{}\n", fmt_g17(y.coeff(k))));
            }
        }
    }
    Ok(out)
}

/// `fbar` subcommand: ergodic estimate next to the closed form (closed-form
/// columns are empty for drift families without one).
pub fn run_fbar(config: &ExperimentConfig) -> Result<String> {
    let report = config.validate()?;
    let x0 = config.x0_field()?;
    let params = ErgodicParams::from_beta(report.beta)?;
    let family = config.stream_family();
    let est = estimate_fbar_ergodic(&config.model, &x0, &params, &family)?;
    let closed = if config.model.is_linear() {
        Some(fbar_closed_form(&config.model, &x0)?)
    } else {
        None
    };
    let mut out = String::from("mode,ergodic,stderr,closed_form,rel_err\n");
    for k in 1..=x0.n() {
        let (cf, rel) = match &closed {
            Some(c) => {
                let denom = c.coeff(k).abs().max(1e-300);
                (
                    fmt_g17(c.coeff(k)),
                    fmt_g17((est.mean.coeff(k) - c.coeff(k)).abs() / denom),
                )
            }
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{k},{},{},{cf},{rel}\n",
            fmt_g17(est.mean.coeff(k)),
            fmt_g17(est.stderr[k - 1])
        ));
    }
    Ok(out)
}

/// Outcome of the `mixing` subcommand.
pub struct MixingOutcome {
    pub curve: Vec<GapPoint>,
    pub fit: Result<DecayFit>,
}

impl MixingOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,gap,stderr\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_g17(p.t),
                fmt_g17(p.gap),
                fmt_g17(p.stderr)
            ));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        match &self.fit {
            Ok(fit) => format!(
                "rate={:.4} intercept={:.4} residual={:.2e} points={}",
                fit.rate, fit.intercept, fit.residual, fit.used_points
            ),
            Err(e) => format!("rate=n/a ({e})"),
        }
    }
}

/// `mixing` subcommand: gap curve from the config's initial data plus a
/// fitted decay rate.  The grid spans eight mixing times of the guaranteed
/// rate `beta/2` with dense spacing near zero, so the usable window before
/// the noise floor holds enough points even when the actual decay is much
/// faster than the guarantee.
pub fn run_mixing(config: &ExperimentConfig, m_paths: usize, h: f64) -> Result<MixingOutcome> {
    let report = config.validate()?;
    if !config.model.is_linear() {
        return Err(SimError::Config(
            "mixing study needs the LINEAR family for a closed-form reference".into(),
        ));
    }
    let x0 = config.x0_field()?;
    let y0 = config.y0_field()?;
    let fbar = fbar_closed_form(&config.model, &x0)?;
    let t_max = (8.0 / report.beta.max(1e-6)).min(16.0);
    let t_grid: Vec<f64> = (0..=32).map(|i| i as f64 * t_max / 32.0).collect();
    let family = config.stream_family();
    let curve = mixing_gap_curve(&config.model, &x0, &y0, &fbar, &t_grid, m_paths, h, &family)?;
    let fit = fit_exponential_decay(&curve);
    Ok(MixingOutcome { curve, fit })
}

/// `expansion` subcommand: the oracle residual table as CSV.
pub fn run_expansion(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    if !config.model.is_linear() {
        return Err(SimError::Config(
            "expansion study needs the LINEAR family".into(),
        ));
    }
    if config.eps_grid.is_empty() {
        return Err(SimError::Config(
            "expansion study needs a nonempty eps_grid".into(),
        ));
    }
    let x0 = config.x0_field()?;
    let y0 = config.y0_field()?;
    let phi = config.test_function()?;
    let rows = crate::oracle::expansion_residual_study(
        &config.model,
        &x0,
        &y0,
        &phi,
        &config.eps_grid,
        config.sim.t_horizon,
        DEFAULT_ODE_RESOLUTION,
    )?;
    let mut out = String::from("eps,u_eps_minus_ubar,ratio\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_g17(r.eps),
            fmt_g17(r.residual),
            fmt_g17(r.ratio)
        ));
    }
    Ok(out)
}

/// The LINEAR weak-order benchmark used across the test and acceptance
/// suites: `l = pi`, 8 modes, `a = -0.2`, `b = g = 1`, `c = 0.5`,
/// `sigma1 = sigma2 = 0.5`, power covariances `p = 4` (slow) and `p = 2`
/// (fast), horizon `T = 0.5`, `phi = cos((., e1))`, `x0 = e1`, `y0 = 0`.
pub fn benchmark_config(mode: RunMode, n_samples: usize, seed: u64) -> ExperimentConfig {
    use crate::models::{Coeff, CovarianceSpec, DriftModel, LinearDrift};
    let n = 8;
    let mut direction = vec![0.0; n];
    direction[0] = 1.0;
    let mut x0 = vec![0.0; n];
    x0[0] = 1.0;
    ExperimentConfig {
        version: 1,
        model: ModelSpec {
            length_l: std::f64::consts::PI,
            drift: DriftModel::Linear(LinearDrift {
                a: Coeff::Uniform(-0.2),
                b: Coeff::Uniform(1.0),
                f0: Coeff::zero(),
                g: Coeff::Uniform(1.0),
                c: Coeff::Uniform(0.5),
                g0: Coeff::zero(),
            }),
            q1: CovarianceSpec::Power { c: 1.0, p: 4.0 },
            q2: CovarianceSpec::Power { c: 1.0, p: 2.0 },
            sigma1: 0.5,
            sigma2: 0.5,
        },
        sim: SimParams {
            epsilon: 0.125,
            t_horizon: 0.5,
            h_macro: 0.01,
            h_coupled: None,
            n_modes: n,
            n_samples,
            seed,
        },
        eps_grid: (3..=9).map(|j| 0.5f64.powi(j)).collect(),
        mode,
        phi: PhiSpec {
            family: PhiFamily::Cosine,
            direction: Some(direction),
        },
        x0,
        y0: vec![0.0; n],
        out: None,
    }
}
