//! Ergodic estimation of the averaged drift and mixing-rate diagnostics for
//! the frozen fast process.
//!
//! The frozen process forgets its initial condition at least as fast as
//! `exp(-beta t / 2)` with `beta = alpha_1 - L_g`, so burn-in and averaging
//! horizons default to multiples of `1/beta`.  Fits of decay curves exclude
//! points within ten Monte-Carlo standard errors of zero; taking logs of
//! noise would bias every rate toward zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SimError};
use crate::integrators::{step_grid, FrozenStepper};
use crate::models::{apply_f, DriftAverage, ModelSpec};
use crate::noise::{ProcessTag, StreamFamily};
use crate::spectral::SpectralField;

/// Sample chunk size for deterministic parallel reductions: partial sums are
/// formed per fixed chunk and combined in chunk order, so results do not
/// depend on the worker count.
const CHUNK: usize = 256;

/// Burn-in / averaging-window parameters for time averages along the frozen
/// fast process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicParams {
    pub t_burn: f64,
    pub t_avg: f64,
    pub h: f64,
    pub replicas: usize,
}

impl ErgodicParams {
    /// Defaults anchored to the dissipativity margin: `t_burn = 8/beta`,
    /// `t_avg = 80/beta`.
    pub fn from_beta(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(invalid("ergodic defaults need beta > 0"));
        }
        Ok(Self {
            t_burn: 8.0 / beta,
            t_avg: 80.0 / beta,
            h: 0.01,
            replicas: 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_burn > 0.0 && self.t_avg > 0.0 && self.h > 0.0) || self.replicas == 0 {
            return Err(invalid("ergodic parameters must all be positive"));
        }
        Ok(())
    }
}

/// Time-average estimate of `Fbar(x)` with a per-mode replica standard error.
#[derive(Debug, Clone)]
pub struct FbarEstimate {
    pub mean: SpectralField,
    pub stderr: Vec<f64>,
}

/// Estimate `Fbar(x)` as the time average of `F(x, Y^x_s)` over
/// `s in (t_burn, t_burn + t_avg]`, averaged across independent replicas.
pub fn estimate_fbar_ergodic(
    spec: &ModelSpec,
    x: &SpectralField,
    params: &ErgodicParams,
    family: &StreamFamily,
) -> Result<FbarEstimate> {
    params.validate()?;
    let n = x.n();
    let (burn_steps, h) = step_grid(params.t_burn, params.h);
    let avg_steps = (params.t_avg / h).round().max(1.0) as usize;

    let replica_means: Vec<Vec<f64>> = (0..params.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut stepper = FrozenStepper::new(spec, x.clone(), h)?;
            let mut w2 = family.stream(r, ProcessTag::W2);
            let mut y = SpectralField::zero(n, x.length_l());
            for _ in 0..burn_steps {
                stepper.step(&mut y, &mut w2)?;
            }
            let mut acc = vec![0.0; n];
            for _ in 0..avg_steps {
                stepper.step(&mut y, &mut w2)?;
                let f = apply_f(spec, x, &y)?;
                for k in 0..n {
                    acc[k] += f.coeffs()[k];
                }
            }
            for a in acc.iter_mut() {
                *a /= avg_steps as f64;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let r = params.replicas as f64;
    let mut mean = vec![0.0; n];
    for rep in &replica_means {
        for k in 0..n {
            mean[k] += rep[k];
        }
    }
    for m in mean.iter_mut() {
        *m /= r;
    }
    let mut stderr = vec![0.0; n];
    if params.replicas > 1 {
        for k in 0..n {
            let var = replica_means
                .iter()
                .map(|rep| (rep[k] - mean[k]) * (rep[k] - mean[k]))
                .sum::<f64>()
                / (r - 1.0);
            stderr[k] = (var / r).sqrt();
        }
    }
    Ok(FbarEstimate {
        mean: SpectralField::new(mean, x.length_l())?,
        stderr,
    })
}

/// Ergodic `Fbar` provider for drift families without a closed form.  Each
/// call consumes a fresh block of replica streams from its own child family,
/// so repeated runs are deterministic.
pub struct ErgodicFbar<'a> {
    spec: &'a ModelSpec,
    params: ErgodicParams,
    family: StreamFamily,
    next_block: u64,
}

impl<'a> ErgodicFbar<'a> {
    pub fn new(spec: &'a ModelSpec, params: ErgodicParams, family: StreamFamily) -> Self {
        Self {
            spec,
            params,
            family: family.child("ergodic-fbar"),
            next_block: 0,
        }
    }
}

impl DriftAverage for ErgodicFbar<'_> {
    fn fbar(&mut self, x: &SpectralField) -> Result<SpectralField> {
        let block = self.family.child(&format!("call-{}", self.next_block));
        self.next_block += 1;
        Ok(estimate_fbar_ergodic(self.spec, x, &self.params, &block)?.mean)
    }
}

/// One point of a Monte-Carlo decay curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapPoint {
    pub t: f64,
    pub gap: f64,
    pub stderr: f64,
}

struct MomentAccum {
    /// per (time, mode) sums of the sampled vectors
    sum: Vec<f64>,
    /// per (time, mode) sums of squares
    sumsq: Vec<f64>,
    count: usize,
}

impl MomentAccum {
    fn new(slots: usize) -> Self {
        Self {
            sum: vec![0.0; slots],
            sumsq: vec![0.0; slots],
            count: 0,
        }
    }

    fn merge(mut self, other: MomentAccum) -> MomentAccum {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        self.count += other.count;
        self
    }
}

/// Curve of `gap(t) = || E F(x, Y^x_t(y)) - Fbar(x) ||` estimated with `m`
/// frozen paths started at `y`.  `fbar_x` is the reference averaged drift at
/// `x` (closed form or precomputed).
#[allow(clippy::too_many_arguments)]
pub fn mixing_gap_curve(
    spec: &ModelSpec,
    x: &SpectralField,
    y: &SpectralField,
    fbar_x: &SpectralField,
    t_grid: &[f64],
    m: usize,
    h: f64,
    family: &StreamFamily,
) -> Result<Vec<GapPoint>> {
    if m == 0 || t_grid.is_empty() {
        return Err(invalid("mixing curve needs paths and grid points"));
    }
    if !(h > 0.0) {
        return Err(invalid("step must be positive"));
    }
    x.check_same_geometry(y, "mixing_gap_curve")?;
    let n = x.n();
    let record_steps: Vec<usize> = t_grid.iter().map(|t| (t / h).round() as usize).collect();
    let max_step = *record_steps.iter().max().unwrap();

    let chunks: Vec<(u64, u64)> = chunk_ranges(m);
    let accum = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<MomentAccum> {
            let mut acc = MomentAccum::new(t_grid.len() * n);
            for i in lo..hi {
                let mut stepper = FrozenStepper::new(spec, x.clone(), h)?;
                let mut w2 = family.stream(i, ProcessTag::W2);
                let mut yt = y.clone();
                record_if(&mut acc, spec, x, &yt, &record_steps, 0, n)?;
                for step in 1..=max_step {
                    stepper.step(&mut yt, &mut w2)?;
                    record_if(&mut acc, spec, x, &yt, &record_steps, step, n)?;
                }
                acc.count += 1;
            }
            Ok(acc)
        })
        .try_reduce(|| MomentAccum::new(t_grid.len() * n), |a, b| Ok(a.merge(b)))?;

    let mf = accum.count as f64;
    let mut out = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let mut gap_sq = 0.0;
        let mut var_sum = 0.0;
        for k in 0..n {
            let s = accum.sum[j * n + k] / mf;
            let d = s - fbar_x.coeffs()[k];
            gap_sq += d * d;
            if m > 1 {
                let var = (accum.sumsq[j * n + k] / mf - s * s).max(0.0) * mf / (mf - 1.0);
                var_sum += var / mf;
            }
        }
        out.push(GapPoint {
            t,
            gap: gap_sq.sqrt(),
            stderr: var_sum.sqrt(),
        });
    }
    Ok(out)
}

fn record_if(
    acc: &mut MomentAccum,
    spec: &ModelSpec,
    x: &SpectralField,
    y: &SpectralField,
    record_steps: &[usize],
    step: usize,
    n: usize,
) -> Result<()> {
    let mut f: Option<SpectralField> = None;
    for (j, rs) in record_steps.iter().enumerate() {
        if *rs == step {
            if f.is_none() {
                f = Some(apply_f(spec, x, y)?);
            }
            let fv = f.as_ref().unwrap();
            for k in 0..n {
                let v = fv.coeffs()[k];
                acc.sum[j * n + k] += v;
                acc.sumsq[j * n + k] += v * v;
            }
        }
    }
    Ok(())
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

/// Least-squares exponential fit of a decay curve.
#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    /// Fitted decay rate (clamped at zero).
    pub rate: f64,
    /// Fitted value at `t = 0`.
    pub intercept: f64,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    /// Number of points that survived the noise-floor gate.
    pub used_points: usize,
}

/// Fit `gap(t) ~ intercept * exp(-rate t)` by ordinary least squares on the
/// logarithm, over the window where the curve exceeds ten times its
/// Monte-Carlo standard error.
pub fn fit_exponential_decay(curve: &[GapPoint]) -> Result<DecayFit> {
    let usable: Vec<&GapPoint> = curve
        .iter()
        .filter(|p| p.gap > 10.0 * p.stderr && p.gap > 0.0)
        .collect();
    if usable.len() < 4 {
        return Err(SimError::EstimationFailure(format!(
            "only {} usable points above the noise floor (need 4)",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for p in &usable {
        let ly = p.gap.ln();
        st += p.t;
        sy += ly;
        stt += p.t * p.t;
        sty += p.t * ly;
    }
    let denom = n * stt - st * st;
    if denom.abs() < 1e-300 {
        return Err(SimError::EstimationFailure("degenerate time grid".into()));
    }
    let slope = (n * sty - st * sy) / denom;
    let icept = (sy - slope * st) / n;
    let mut ss = 0.0;
    for p in &usable {
        let r = p.gap.ln() - (icept + slope * p.t);
        ss += r * r;
    }
    Ok(DecayFit {
        rate: (-slope).max(0.0),
        intercept: icept.exp(),
        residual: (ss / n).sqrt(),
        used_points: usable.len(),
    })
}

/// Curve of `|| D_x (Fbar(x) - E F(x, Y^x_t(y))) . h ||` estimated by central
/// finite differences in `x` with common random numbers across `x +- delta`.
///
/// `fd_step` of `None` uses `delta = 1e-4 (1 + ||x||)`.
#[allow(clippy::too_many_arguments)]
pub fn mixing_derivative_decay(
    spec: &ModelSpec,
    x: &SpectralField,
    y: &SpectralField,
    direction: &SpectralField,
    fbar: &mut dyn DriftAverage,
    t_grid: &[f64],
    m: usize,
    fd_step: Option<f64>,
    h: f64,
    family: &StreamFamily,
) -> Result<Vec<GapPoint>> {
    if m == 0 || t_grid.is_empty() {
        return Err(invalid("derivative curve needs paths and grid points"));
    }
    x.check_same_geometry(direction, "mixing_derivative_decay")?;
    let norm_h = direction.l2_norm();
    if norm_h == 0.0 {
        return Err(invalid("direction must be nonzero"));
    }
    let n = x.n();
    let delta = fd_step.unwrap_or(1e-4 * (1.0 + x.l2_norm()));
    let unit = direction.scaled(1.0 / norm_h);
    let x_plus = x.add(&unit.scaled(delta))?;
    let x_minus = x.sub(&unit.scaled(delta))?;
    let fd_scale = norm_h / (2.0 * delta);

    // finite difference of Fbar along the direction
    let fbar_plus = fbar.fbar(&x_plus)?;
    let fbar_minus = fbar.fbar(&x_minus)?;
    let dfbar: Vec<f64> = fbar_plus
        .coeffs()
        .iter()
        .zip(fbar_minus.coeffs())
        .map(|(p, q)| (p - q) * fd_scale)
        .collect();

    let record_steps: Vec<usize> = t_grid.iter().map(|t| (t / h).round() as usize).collect();
    let max_step = *record_steps.iter().max().unwrap();
    let chunks = chunk_ranges(m);
    let accum = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<MomentAccum> {
            let mut acc = MomentAccum::new(t_grid.len() * n);
            for i in lo..hi {
                let mut stepper_p = FrozenStepper::new(spec, x_plus.clone(), h)?;
                let mut stepper_m = FrozenStepper::new(spec, x_minus.clone(), h)?;
                // common random numbers: the minus path replays the same stream
                let mut w2p = family.stream(i, ProcessTag::W2);
                let mut w2m = w2p.clone();
                let mut yp = y.clone();
                let mut ym = y.clone();
                record_fd(
                    &mut acc,
                    spec,
                    (&x_plus, &x_minus),
                    (&yp, &ym),
                    fd_scale,
                    &record_steps,
                    0,
                    n,
                )?;
                for step in 1..=max_step {
                    stepper_p.step(&mut yp, &mut w2p)?;
                    stepper_m.step(&mut ym, &mut w2m)?;
                    record_fd(
                        &mut acc,
                        spec,
                        (&x_plus, &x_minus),
                        (&yp, &ym),
                        fd_scale,
                        &record_steps,
                        step,
                        n,
                    )?;
                }
                acc.count += 1;
            }
            Ok(acc)
        })
        .try_reduce(|| MomentAccum::new(t_grid.len() * n), |a, b| Ok(a.merge(b)))?;

    let mf = accum.count as f64;
    let mut out = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let mut val_sq = 0.0;
        let mut var_sum = 0.0;
        for k in 0..n {
            let s = accum.sum[j * n + k] / mf;
            let d = dfbar[k] - s;
            val_sq += d * d;
            if m > 1 {
                let var = (accum.sumsq[j * n + k] / mf - s * s).max(0.0) * mf / (mf - 1.0);
                var_sum += var / mf;
            }
        }
        out.push(GapPoint {
            t,
            gap: val_sq.sqrt(),
            stderr: var_sum.sqrt(),
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn record_fd(
    acc: &mut MomentAccum,
    spec: &ModelSpec,
    x_pair: (&SpectralField, &SpectralField),
    y_pair: (&SpectralField, &SpectralField),
    fd_scale: f64,
    record_steps: &[usize],
    step: usize,
    n: usize,
) -> Result<()> {
    let mut fd: Option<Vec<f64>> = None;
    for (j, rs) in record_steps.iter().enumerate() {
        if *rs == step {
            if fd.is_none() {
                let fp = apply_f(spec, x_pair.0, y_pair.0)?;
                let fm = apply_f(spec, x_pair.1, y_pair.1)?;
                fd = Some(
                    fp.coeffs()
                        .iter()
                        .zip(fm.coeffs())
                        .map(|(a, b)| (a - b) * fd_scale)
                        .collect(),
                );
            }
            let v = fd.as_ref().unwrap();
            for k in 0..n {
                acc.sum[j * n + k] += v[k];
                acc.sumsq[j * n + k] += v[k] * v[k];
            }
        }
    }
    Ok(())
}
