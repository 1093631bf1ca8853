//! Noise-free weak values for mode-diagonal linear models, and Monte-Carlo
//! estimators for the derivative of the averaged value function and the
//! first expansion coefficient of the weak error in the scale parameter.
//!
//! For the LINEAR family each mode pair `(X_k, Y_k)` is a two-dimensional
//! linear SDE, so its law is Gaussian and the mean/covariance propagate
//! through a linear ODE and a Lyapunov ODE.  Expectations of cosine test
//! functions then have closed form, which gives weak errors with no
//! Monte-Carlo noise and no time-discretization bias.  Value functions are
//! never solved as PDEs; everything is an expectation.

use rayon::prelude::*;

use crate::error::{invalid, Result, SimError};
use crate::integrators::{step_grid, AveragedStepper, FrozenStepper};
use crate::models::{
    apply_f, fbar_closed_form, fbar_jacobian_diag, require_valid, ClosedFormFbar, ModelSpec,
    TestFunction,
};
use crate::noise::{ProcessTag, StreamFamily};
use crate::spectral::{exp_euler_weight, SpectralField};

const CHUNK: usize = 256;

/// Default per-unit-stiff-time resolution of the moment ODE integrator.
pub const DEFAULT_ODE_RESOLUTION: usize = 400;

/// Gaussian law of one mode pair: means and the symmetric 2x2 covariance.
#[derive(Debug, Clone, Copy)]
pub struct ModeMoments {
    pub mean_x: f64,
    pub mean_y: f64,
    pub s_xx: f64,
    pub s_xy: f64,
    pub s_yy: f64,
}

impl ModeMoments {
    pub fn cov_det(&self) -> f64 {
        self.s_xx * self.s_yy - self.s_xy * self.s_xy
    }
}

/// Joint Gaussian law of the truncated system (modes independent).
#[derive(Debug, Clone)]
pub struct GaussianModeMoments {
    pub modes: Vec<ModeMoments>,
    pub length_l: f64,
    /// Smallest covariance determinant seen anywhere along the integration;
    /// a PSD diagnostic for the Lyapunov propagation.
    pub min_cov_det: f64,
}

/// `(e^z - 1) / z`, stable near zero.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Exact Gaussian law of the coupled pair at time `t` for LINEAR specs.
///
/// Per mode the drift matrix is `[[-alpha+a, b], [g/eps, -(alpha+c)/eps]]`
/// with independent additive noise intensities `sigma1^2 lambda_{1,k}` and
/// `sigma2^2 lambda_{2,k}/eps`.  Means solve the linear ODE and covariances
/// the Lyapunov ODE, integrated with classical fourth-order steps whose count
/// scales with the stiffness `1/eps`: `resolution` steps per unit stiff time,
/// so doubling `resolution` halves the step.
pub fn gaussian_moments_coupled(
    spec: &ModelSpec,
    x0: &SpectralField,
    y0: &SpectralField,
    eps: f64,
    t: f64,
    resolution: usize,
) -> Result<GaussianModeMoments> {
    let d = spec.linear()?;
    if !(eps > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    if !(t >= 0.0) {
        return Err(invalid("time must be nonnegative"));
    }
    x0.check_same_geometry(y0, "gaussian_moments_coupled")?;
    let n = x0.n();
    let params = spec.operator_params(n)?;
    let res = resolution.max(1) as f64;

    let per_mode: Vec<(ModeMoments, f64)> = (1..=n)
        .into_par_iter()
        .map(|k| {
            let alpha = params.alpha(k);
            let m11 = -alpha + d.a.at(k);
            let m12 = d.b.at(k);
            let m21 = d.g.at(k) / eps;
            let m22 = -(alpha + d.c.at(k)) / eps;
            let u1 = d.f0.at(k);
            let u2 = d.g0.at(k) / eps;
            let n1 = spec.sigma1 * spec.sigma1 * spec.q1.lambda(k);
            let n2 = spec.sigma2 * spec.sigma2 * spec.q2.lambda(k) / eps;
            let rate = m11.abs() + m12.abs() + m21.abs() + m22.abs();
            let steps = ((t * res * rate.max(1.0)).ceil() as usize).max(16);
            let h = t / steps as f64;

            let deriv = |z: &[f64; 5]| -> [f64; 5] {
                [
                    m11 * z[0] + m12 * z[1] + u1,
                    m21 * z[0] + m22 * z[1] + u2,
                    2.0 * (m11 * z[2] + m12 * z[3]) + n1,
                    m21 * z[2] + (m11 + m22) * z[3] + m12 * z[4],
                    2.0 * (m21 * z[3] + m22 * z[4]) + n2,
                ]
            };

            let mut z = [x0.coeff(k), y0.coeff(k), 0.0, 0.0, 0.0];
            let mut min_det = 0.0f64;
            if t > 0.0 {
                for _ in 0..steps {
                    let k1 = deriv(&z);
                    let mut z2 = z;
                    for i in 0..5 {
                        z2[i] = z[i] + 0.5 * h * k1[i];
                    }
                    let k2 = deriv(&z2);
                    for i in 0..5 {
                        z2[i] = z[i] + 0.5 * h * k2[i];
                    }
                    let k3 = deriv(&z2);
                    for i in 0..5 {
                        z2[i] = z[i] + h * k3[i];
                    }
                    let k4 = deriv(&z2);
                    for i in 0..5 {
                        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    min_det = min_det.min(z[2] * z[4] - z[3] * z[3]);
                }
            }
            let m = ModeMoments {
                mean_x: z[0],
                mean_y: z[1],
                s_xx: z[2],
                s_xy: z[3],
                s_yy: z[4],
            };
            (m, min_det)
        })
        .collect();

    let min_cov_det = per_mode.iter().map(|(_, d)| *d).fold(0.0f64, f64::min);
    Ok(GaussianModeMoments {
        modes: per_mode.into_iter().map(|(m, _)| m).collect(),
        length_l: x0.length_l(),
        min_cov_det,
    })
}

/// Exact Gaussian law of the averaged equation at time `t` (closed form; the
/// averaged system is a scalar linear SDE per mode).
pub fn gaussian_moments_averaged(
    spec: &ModelSpec,
    x0: &SpectralField,
    t: f64,
) -> Result<GaussianModeMoments> {
    let d = spec.linear()?;
    if !(t >= 0.0) {
        return Err(invalid("time must be nonnegative"));
    }
    let n = x0.n();
    let params = spec.operator_params(n)?;
    let modes = (1..=n)
        .map(|k| {
            let alpha = params.alpha(k);
            let abar = -alpha + d.a.at(k) + d.b.at(k) * d.g.at(k) / (alpha + d.c.at(k));
            let fbar0 = d.f0.at(k) + d.b.at(k) * d.g0.at(k) / (alpha + d.c.at(k));
            let mean_x = (abar * t).exp() * x0.coeff(k) + t * phi1(abar * t) * fbar0;
            let s_xx = spec.sigma1 * spec.sigma1 * spec.q1.lambda(k) * t * phi1(2.0 * abar * t);
            ModeMoments {
                mean_x,
                mean_y: 0.0,
                s_xx,
                s_xy: 0.0,
                s_yy: 0.0,
            }
        })
        .collect();
    Ok(GaussianModeMoments {
        modes,
        length_l: x0.length_l(),
        min_cov_det: 0.0,
    })
}

/// Exact expectation of a cosine test function under a Gaussian law:
/// `E cos((X, v)) = cos(m) exp(-s^2/2)` with `m, s^2` the mean and variance
/// of the projection.
pub fn weak_value_gaussian(moments: &GaussianModeMoments, phi: &TestFunction) -> Result<f64> {
    match phi {
        TestFunction::Cosine { direction } => {
            if direction.n() != moments.modes.len() || direction.length_l() != moments.length_l {
                return Err(invalid(
                    "test-function direction does not match moment geometry",
                ));
            }
            let mut m = 0.0;
            let mut s2 = 0.0;
            for (v, mode) in direction.coeffs().iter().zip(&moments.modes) {
                m += v * mode.mean_x;
                s2 += v * v * mode.s_xx;
            }
            Ok(m.cos() * (-s2 / 2.0).exp())
        }
        TestFunction::Rational => Err(SimError::UnsupportedOperation(
            "no closed-form Gaussian expectation for the rational test function".into(),
        )),
    }
}

/// Mean with a Monte-Carlo standard error.
#[derive(Debug, Clone, Copy)]
pub struct MeanStderr {
    pub value: f64,
    pub stderr: f64,
}

/// Per-sample vectors whose mean is `D_x ubar(t, x)`:
/// `w_i[k] = psi_k(t) * phi'(Xbar_t^{(i)})_k` with `psi` the deterministic
/// diagonal variation factors.
struct GradientSamples {
    samples: Vec<Vec<f64>>,
}

impl GradientSamples {
    fn mean(&self, n: usize) -> Vec<f64> {
        let mut mean = vec![0.0; n];
        for w in &self.samples {
            for k in 0..n {
                mean[k] += w[k];
            }
        }
        let mf = self.samples.len() as f64;
        for m in mean.iter_mut() {
            *m /= mf;
        }
        mean
    }

    /// Mean and standard error of the projection `(w_i, dir)`.
    fn project(&self, dir: &[f64]) -> MeanStderr {
        let mf = self.samples.len() as f64;
        let vals: Vec<f64> = self
            .samples
            .iter()
            .map(|w| w.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        let mean = vals.iter().sum::<f64>() / mf;
        let stderr = if self.samples.len() > 1 {
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (mf - 1.0);
            (var / mf).sqrt()
        } else {
            0.0
        };
        MeanStderr {
            value: mean,
            stderr,
        }
    }
}

/// Simulate `m` averaged paths to time `t` and collect the per-sample
/// gradient vectors scaled by the deterministic variation factors.
fn averaged_gradient_samples(
    spec: &ModelSpec,
    t: f64,
    x: &SpectralField,
    phi: &TestFunction,
    m: usize,
    h: f64,
    family: &StreamFamily,
) -> Result<GradientSamples> {
    let n = x.n();
    let params = spec.operator_params(n)?;
    let rho = fbar_jacobian_diag(spec, n)?;
    let (steps, h) = step_grid(t, h);

    // discrete first-variation factor along e_k; deterministic because the
    // LINEAR averaged Jacobian does not depend on the path
    let mut psi = vec![1.0; n];
    for k in 0..n {
        let alpha = params.alpha(k + 1);
        let decay = (-alpha * h).exp();
        let w = exp_euler_weight(alpha, h, 1.0)?;
        for _ in 0..steps {
            psi[k] = decay * psi[k] + w * rho[k] * psi[k];
        }
    }

    let chunks = chunk_ranges(m);
    let samples: Vec<Vec<Vec<f64>>> = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<Vec<Vec<f64>>> {
            let mut stepper = AveragedStepper::new(spec, n, h)?;
            let mut fbar = ClosedFormFbar::new(spec)?;
            let mut out = Vec::with_capacity((hi - lo) as usize);
            for i in lo..hi {
                let mut w1 = family.stream(i, ProcessTag::W1);
                let mut xbar = x.clone();
                for _ in 0..steps {
                    stepper.step(&mut xbar, &mut fbar, &mut w1)?;
                }
                let grad = phi.phi_grad(&xbar)?;
                out.push(grad.coeffs().iter().zip(&psi).map(|(g, p)| g * p).collect());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GradientSamples {
        samples: samples.into_iter().flatten().collect(),
    })
}

/// Monte-Carlo estimate of `D_x ubar(t, x) . h`, the derivative of
/// `E phi(Xbar_t(x))` along `direction`, via the deterministic first
/// variation stepped alongside averaged paths (LINEAR family).
#[allow(clippy::too_many_arguments)]
pub fn estimate_dx_ubar(
    spec: &ModelSpec,
    t: f64,
    x: &SpectralField,
    direction: &SpectralField,
    phi: &TestFunction,
    m: usize,
    h: f64,
    family: &StreamFamily,
) -> Result<MeanStderr> {
    if direction.l2_norm() == 0.0 {
        return Err(invalid("direction must be nonzero"));
    }
    x.check_same_geometry(direction, "estimate_dx_ubar")?;
    if t == 0.0 {
        // eta_0 = direction, so the derivative is exactly phi'(x) . direction
        let grad = phi.phi_grad(x)?;
        return Ok(MeanStderr {
            value: grad.inner(direction)?,
            stderr: 0.0,
        });
    }
    let samples = averaged_gradient_samples(spec, t, x, phi, m, h, family)?;
    Ok(samples.project(direction.coeffs()))
}

/// Truncation and sampling parameters for the expansion-coefficient estimate.
#[derive(Debug, Clone)]
pub struct U1Params {
    /// Truncation horizon of the integral over the frozen process.
    pub s_horizon: f64,
    /// Geometric spacing ratio of the quadrature nodes.
    pub node_ratio: f64,
    /// Frozen-process paths.
    pub m_paths: usize,
    /// Averaged paths behind the value-function derivative.
    pub m_grad: usize,
    /// Step size for both path families.
    pub h: f64,
}

impl U1Params {
    pub fn from_beta(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(invalid("u1 defaults need beta > 0"));
        }
        Ok(Self {
            s_horizon: 12.0 / beta,
            node_ratio: 1.3,
            m_paths: 4000,
            m_grad: 10_000,
            h: 0.01,
        })
    }
}

/// The expansion quantities around the averaged value: `ubar`, the
/// coefficient `u1` with its Monte-Carlo error, and the truncation-tail
/// record.
#[derive(Debug, Clone)]
pub struct ExpansionEstimates {
    pub ubar: f64,
    pub u1: f64,
    pub u1_stderr: f64,
    pub s_horizon: f64,
    pub quad_nodes: usize,
    /// Bound on the discarded tail: `(2 |rho(0)| / beta) exp(-beta S / 2)`.
    pub tail_bound: f64,
}

/// Estimate the first expansion coefficient
/// `u1(t, x, y) = int_0^inf E (F(x, Y^x_s(y)) - Fbar(x), D_x ubar(t, x)) ds`
/// by trapezoidal quadrature over geometrically clustered nodes, with the
/// inner expectation sampled along frozen paths.
///
/// Requires `s_horizon >= 10/beta` so the discarded tail is controlled by
/// the mixing decay.
pub fn estimate_u1(
    spec: &ModelSpec,
    t: f64,
    x: &SpectralField,
    y: &SpectralField,
    phi: &TestFunction,
    params: &U1Params,
    family: &StreamFamily,
) -> Result<ExpansionEstimates> {
    let report = require_valid(spec, x.n())?;
    if params.s_horizon < 10.0 / report.beta {
        return Err(invalid(format!(
            "truncation horizon {} below 10/beta = {}",
            params.s_horizon,
            10.0 / report.beta
        )));
    }
    if !(params.node_ratio > 1.0) || params.m_paths == 0 || params.m_grad == 0 {
        return Err(invalid("u1 parameters out of range"));
    }
    x.check_same_geometry(y, "estimate_u1")?;
    let n = x.n();
    let fbar_x = fbar_closed_form(spec, x)?;

    // stage 1: D_x ubar(t, x) as a vector, keeping the per-sample spread
    let grad = averaged_gradient_samples(
        spec,
        t,
        x,
        phi,
        params.m_grad,
        params.h,
        &family.child("dx-ubar"),
    )?;
    let v_hat = grad.mean(n);

    // quadrature nodes on the step grid, clustered geometrically near zero
    let (max_steps, h) = step_grid(params.s_horizon, params.h);
    let node_steps = geometric_nodes(max_steps, params.node_ratio);
    let weights = trapezoid_weights(&node_steps, h);

    // stage 2: frozen ensemble; per-path quadrature of the projected gap,
    // with the mean gap vector kept for the gradient-error term
    let chunks = chunk_ranges(params.m_paths);
    let fam_frozen = family.child("frozen-u1");
    let per_chunk: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut integrals = Vec::with_capacity((hi - lo) as usize);
            let mut gap_sum = vec![0.0; n];
            for i in lo..hi {
                let mut stepper = FrozenStepper::new(spec, x.clone(), h)?;
                let mut w2 = fam_frozen.stream(i, ProcessTag::W2);
                let mut yt = y.clone();
                let mut integral = 0.0;
                let mut node_idx = 0;
                for step in 0..=max_steps {
                    if step > 0 {
                        stepper.step(&mut yt, &mut w2)?;
                    }
                    if node_idx < node_steps.len() && node_steps[node_idx] == step {
                        let f = apply_f(spec, x, &yt)?;
                        let w = weights[node_idx];
                        let mut rho = 0.0;
                        for k in 0..n {
                            let gap = f.coeffs()[k] - fbar_x.coeffs()[k];
                            rho += gap * v_hat[k];
                            gap_sum[k] += w * gap;
                        }
                        integral += w * rho;
                        node_idx += 1;
                    }
                }
                integrals.push(integral);
            }
            Ok((integrals, gap_sum))
        })
        .collect::<Result<_>>()?;

    let mut integrals = Vec::with_capacity(params.m_paths);
    let mut g_integral = vec![0.0; n];
    for (ints, gaps) in per_chunk {
        integrals.extend(ints);
        for k in 0..n {
            g_integral[k] += gaps[k];
        }
    }
    let mf = integrals.len() as f64;
    for g in g_integral.iter_mut() {
        *g /= mf;
    }

    let u1 = integrals.iter().sum::<f64>() / mf;
    let var_quad = if integrals.len() > 1 {
        integrals.iter().map(|v| (v - u1) * (v - u1)).sum::<f64>() / (mf - 1.0) / mf
    } else {
        0.0
    };
    // second error source: the gradient vector is itself a Monte-Carlo mean,
    // independent of the frozen ensemble
    let grad_err = grad.project(&g_integral).stderr;
    let u1_stderr = (var_quad + grad_err * grad_err).sqrt();

    // tail record: |rho(0)| e^{-beta s/2} integrated past the horizon
    let f0 = apply_f(spec, x, y)?;
    let rho0 = f0
        .coeffs()
        .iter()
        .zip(fbar_x.coeffs())
        .zip(&v_hat)
        .map(|((f, fb), v)| (f - fb) * v)
        .sum::<f64>()
        .abs();
    let tail_bound = 2.0 * rho0 / report.beta * (-report.beta * params.s_horizon / 2.0).exp();

    let ubar = weak_value_gaussian(&gaussian_moments_averaged(spec, x, t)?, phi)?;

    Ok(ExpansionEstimates {
        ubar,
        u1,
        u1_stderr,
        s_horizon: params.s_horizon,
        quad_nodes: node_steps.len(),
        tail_bound,
    })
}

fn geometric_nodes(max_steps: usize, ratio: f64) -> Vec<usize> {
    let mut node_steps: Vec<usize> = vec![0];
    if max_steps == 0 {
        return node_steps;
    }
    node_steps.push(1);
    loop {
        let last = *node_steps.last().unwrap();
        let next = ((last as f64 * ratio).ceil() as usize).max(last + 1);
        if next >= max_steps {
            node_steps.push(max_steps);
            break;
        }
        node_steps.push(next);
    }
    node_steps
}

fn trapezoid_weights(node_steps: &[usize], h: f64) -> Vec<f64> {
    let times: Vec<f64> = node_steps.iter().map(|s| *s as f64 * h).collect();
    let n = times.len();
    let mut w = vec![0.0; n];
    for j in 0..n.saturating_sub(1) {
        let dt = times[j + 1] - times[j];
        w[j] += dt / 2.0;
        w[j + 1] += dt / 2.0;
    }
    w
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

/// One row of the expansion-residual table.
#[derive(Debug, Clone, Copy)]
pub struct ResidualRow {
    pub eps: f64,
    /// `u^eps - ubar`, both from the Gaussian oracle.
    pub residual: f64,
    /// `(u^eps - ubar) / eps`.
    pub ratio: f64,
}

/// Oracle-route study of the residual `u^eps - ubar` across a grid of scale
/// parameters; the ratio column stabilizing as `eps` shrinks is the
/// first-order expansion made visible.
pub fn expansion_residual_study(
    spec: &ModelSpec,
    x0: &SpectralField,
    y0: &SpectralField,
    phi: &TestFunction,
    eps_grid: &[f64],
    t: f64,
    resolution: usize,
) -> Result<Vec<ResidualRow>> {
    let averaged = gaussian_moments_averaged(spec, x0, t)?;
    let ubar = weak_value_gaussian(&averaged, phi)?;
    eps_grid
        .iter()
        .map(|&eps| {
            let coupled = gaussian_moments_coupled(spec, x0, y0, eps, t, resolution)?;
            let u_eps = weak_value_gaussian(&coupled, phi)?;
            Ok(ResidualRow {
                eps,
                residual: u_eps - ubar,
                ratio: (u_eps - ubar) / eps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Coeff, CovarianceSpec, DriftModel, LinearDrift};
    use approx::assert_relative_eq;

    fn linear_spec(a: f64, b: f64, g: f64, c: f64, sigma1: f64, sigma2: f64) -> ModelSpec {
        ModelSpec {
            length_l: std::f64::consts::PI,
            drift: DriftModel::Linear(LinearDrift {
                a: Coeff::Uniform(a),
                b: Coeff::Uniform(b),
                f0: Coeff::zero(),
                g: Coeff::Uniform(g),
                c: Coeff::Uniform(c),
                g0: Coeff::zero(),
            }),
            q1: CovarianceSpec::Power { c: 1.0, p: 4.0 },
            q2: CovarianceSpec::Power { c: 1.0, p: 2.0 },
            sigma1,
            sigma2,
        }
    }

    fn benchmark_spec() -> ModelSpec {
        linear_spec(-0.2, 1.0, 1.0, 0.5, 0.5, 0.5)
    }

    #[test]
    fn decay_only_mean() {
        let spec = linear_spec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let n = 3;
        let x0 = SpectralField::new(vec![1.0, -2.0, 0.5], spec.length_l).unwrap();
        let y0 = SpectralField::zero(n, spec.length_l);
        let t = 0.7;
        let m = gaussian_moments_coupled(&spec, &x0, &y0, 0.25, t, 400).unwrap();
        let op = x0.operator_params();
        for k in 1..=n {
            let expect = (-op.alpha(k) * t).exp() * x0.coeff(k);
            assert_relative_eq!(m.modes[k - 1].mean_x, expect, max_relative = 1e-9);
            assert!(m.modes[k - 1].s_xx.abs() < 1e-15);
        }
    }

    #[test]
    fn stationary_fast_variance_independent_of_eps() {
        let spec = linear_spec(0.0, 0.0, 0.0, 0.5, 0.0, 1.0);
        let n = 2;
        let x0 = SpectralField::zero(n, spec.length_l);
        let y0 = SpectralField::zero(n, spec.length_l);
        let op = x0.operator_params();
        for eps in [0.5, 0.125, 0.03125] {
            let m = gaussian_moments_coupled(&spec, &x0, &y0, eps, 2.0, 400).unwrap();
            for k in 1..=n {
                let expect = spec.q2.lambda(k) / (2.0 * (op.alpha(k) + 0.5));
                assert_relative_eq!(m.modes[k - 1].s_yy, expect, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn substep_doubling_converged() {
        let spec = benchmark_spec();
        let n = 4;
        let x0 = SpectralField::basis(1, n, spec.length_l);
        let y0 = SpectralField::zero(n, spec.length_l);
        let a = gaussian_moments_coupled(&spec, &x0, &y0, 1.0 / 64.0, 0.5, 400).unwrap();
        let b = gaussian_moments_coupled(&spec, &x0, &y0, 1.0 / 64.0, 0.5, 800).unwrap();
        for (ma, mb) in a.modes.iter().zip(&b.modes) {
            for (va, vb) in [
                (ma.mean_x, mb.mean_x),
                (ma.mean_y, mb.mean_y),
                (ma.s_xx, mb.s_xx),
                (ma.s_xy, mb.s_xy),
                (ma.s_yy, mb.s_yy),
            ] {
                assert!(
                    (va - vb).abs() <= 1e-8 * (1.0 + vb.abs()),
                    "moment changed by more than 1e-8 under substep doubling: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn lyapunov_stays_psd() {
        let spec = benchmark_spec();
        let n = 8;
        let x0 = SpectralField::basis(1, n, spec.length_l);
        let y0 = SpectralField::zero(n, spec.length_l);
        for eps in [0.125, 1.0 / 64.0, 1.0 / 512.0] {
            for t in [0.1, 0.5, 1.0] {
                let m = gaussian_moments_coupled(&spec, &x0, &y0, eps, t, 400).unwrap();
                assert!(
                    m.min_cov_det >= -1e-12,
                    "covariance determinant dipped to {} at eps={eps}, t={t}",
                    m.min_cov_det
                );
            }
        }
    }

    #[test]
    fn weak_value_examples() {
        let l = std::f64::consts::PI;
        let mk = |mean_x: f64, s_xx: f64| GaussianModeMoments {
            modes: vec![ModeMoments {
                mean_x,
                mean_y: 0.0,
                s_xx,
                s_xy: 0.0,
                s_yy: 0.0,
            }],
            length_l: l,
            min_cov_det: 0.0,
        };
        let phi = TestFunction::cosine(SpectralField::basis(1, 1, l));
        assert_relative_eq!(weak_value_gaussian(&mk(0.0, 0.0), &phi).unwrap(), 1.0);
        assert_relative_eq!(
            weak_value_gaussian(&mk(0.0, 2.0), &phi).unwrap(),
            (-1.0f64).exp(),
            max_relative = 1e-15
        );
        assert!(
            weak_value_gaussian(&mk(std::f64::consts::FRAC_PI_2, 0.3), &phi)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(matches!(
            weak_value_gaussian(&mk(0.0, 0.0), &TestFunction::Rational),
            Err(SimError::UnsupportedOperation(_))
        ));
    }

    #[test]
    fn dx_ubar_at_time_zero_is_gradient() {
        let spec = benchmark_spec();
        let n = 4;
        let x = SpectralField::basis(1, n, spec.length_l);
        let dir = SpectralField::new(vec![0.5, -1.0, 0.0, 0.2], spec.length_l).unwrap();
        let phi = TestFunction::cosine(SpectralField::basis(1, n, spec.length_l));
        let family = StreamFamily::new(1);
        let est = estimate_dx_ubar(&spec, 0.0, &x, &dir, &phi, 10, 0.01, &family).unwrap();
        let grad = phi.phi_grad(&x).unwrap();
        assert_relative_eq!(est.value, grad.inner(&dir).unwrap(), max_relative = 1e-14);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn dx_ubar_matches_gaussian_closed_form() {
        // For v = e1 the projection is scalar Gaussian:
        // D_x ubar . e1 = -E sin(Xbar_1) psi_1 = -sin(m) e^{-s/2} psi_1.
        let spec = benchmark_spec();
        let n = 2;
        let t = 0.5;
        let x = SpectralField::basis(1, n, spec.length_l);
        let dir = SpectralField::basis(1, n, spec.length_l);
        let phi = TestFunction::cosine(SpectralField::basis(1, n, spec.length_l));
        let family = StreamFamily::new(31);
        let est = estimate_dx_ubar(&spec, t, &x, &dir, &phi, 20_000, 0.005, &family).unwrap();

        let moments = gaussian_moments_averaged(&spec, &x, t).unwrap();
        let m1 = moments.modes[0].mean_x;
        let s1 = moments.modes[0].s_xx;
        let rho = fbar_jacobian_diag(&spec, n).unwrap();
        let op = x.operator_params();
        let psi1 = ((-op.alpha(1) + rho[0]) * t).exp();
        let closed = -m1.sin() * (-s1 / 2.0).exp() * psi1;
        assert!(
            (est.value - closed).abs() <= 3.0 * est.stderr + 2e-3 * closed.abs(),
            "dx_ubar {} vs closed form {closed} (stderr {})",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn dx_ubar_bounded_by_gradient_times_variation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        for trial in 0..4usize {
            let spec = linear_spec(
                rng.gen_range(-0.5..0.3),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..0.9),
                0.4,
                0.4,
            );
            let n = 3;
            let t = 0.6;
            let x = SpectralField::new(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                spec.length_l,
            )
            .unwrap();
            let dir = SpectralField::basis(1 + trial % n, n, spec.length_l);
            let phi = TestFunction::cosine(SpectralField::basis(1, n, spec.length_l));
            let family = StreamFamily::new(5000 + trial as u64);
            let est = estimate_dx_ubar(&spec, t, &x, &dir, &phi, 2000, 0.01, &family).unwrap();

            // ||eta_t|| <= exp((max rho_k) t) ||dir|| for the diagonal family
            let rho = fbar_jacobian_diag(&spec, n).unwrap();
            let op = x.operator_params();
            let eta_sup = (0..n)
                .map(|k| ((-op.alpha(k + 1) + rho[k]) * t).exp())
                .fold(0.0f64, f64::max)
                * dir.l2_norm();
            let bound = phi.sup_grad_norm() * eta_sup;
            assert!(
                est.value.abs() <= bound + 3.0 * est.stderr + 1e-12,
                "|D_x ubar . h| = {} exceeds bound {bound}",
                est.value
            );
        }
    }

    #[test]
    fn u1_zero_when_f_ignores_fast() {
        let spec = linear_spec(0.4, 0.0, 1.0, 0.5, 0.5, 0.5);
        let n = 3;
        let x = SpectralField::basis(1, n, spec.length_l);
        let y = SpectralField::zero(n, spec.length_l);
        let phi = TestFunction::cosine(SpectralField::basis(1, n, spec.length_l));
        let params = U1Params {
            m_paths: 200,
            m_grad: 200,
            ..U1Params::from_beta(0.5).unwrap()
        };
        let family = StreamFamily::new(8);
        let est = estimate_u1(&spec, 0.5, &x, &y, &phi, &params, &family).unwrap();
        assert!(est.u1.abs() <= 1e-12, "u1 = {}", est.u1);
    }

    #[test]
    fn u1_zero_for_constant_test_function() {
        // cosine with direction zero is the constant function 1
        let spec = benchmark_spec();
        let n = 3;
        let x = SpectralField::basis(1, n, spec.length_l);
        let y = SpectralField::zero(n, spec.length_l);
        let phi = TestFunction::cosine(SpectralField::zero(n, spec.length_l));
        let params = U1Params {
            m_paths: 200,
            m_grad: 200,
            ..U1Params::from_beta(0.5).unwrap()
        };
        let family = StreamFamily::new(9);
        let est = estimate_u1(&spec, 0.5, &x, &y, &phi, &params, &family).unwrap();
        assert!(est.u1.abs() <= 1e-12, "u1 = {}", est.u1);
    }

    #[test]
    fn residual_study_degenerate_cases() {
        // no coupling at all: u^eps = ubar for every eps
        let spec = linear_spec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let n = 2;
        let x0 = SpectralField::basis(1, n, spec.length_l);
        let y0 = SpectralField::zero(n, spec.length_l);
        let phi = TestFunction::cosine(SpectralField::basis(1, n, spec.length_l));
        let rows =
            expansion_residual_study(&spec, &x0, &y0, &phi, &[0.25, 0.0625], 0.5, 400).unwrap();
        for row in &rows {
            assert!(row.residual.abs() <= 1e-8, "residual {}", row.residual);
        }

        // b = 0: slow decoupled from fast, u^eps = ubar exactly
        let spec = linear_spec(-0.3, 0.0, 1.0, 0.5, 0.5, 0.5);
        let rows =
            expansion_residual_study(&spec, &x0, &y0, &phi, &[0.25, 0.0625], 0.5, 400).unwrap();
        for row in &rows {
            assert!(row.residual.abs() <= 1e-8, "residual {}", row.residual);
        }
    }

    #[test]
    fn quadrature_reproduces_exact_exponential_integral() {
        let (max_steps, h) = step_grid(24.0, 0.01);
        let node_steps = geometric_nodes(max_steps, 1.3);
        let w = trapezoid_weights(&node_steps, h);
        let quad: f64 = node_steps
            .iter()
            .zip(&w)
            .map(|(s, w)| w * (-1.5 * (*s as f64) * h).exp())
            .sum();
        let exact = (1.0 - (-1.5f64 * 24.0).exp()) / 1.5;
        // the ratio-1.3 trapezoid overestimates a convex integrand by ~1.2%
        assert!(
            (quad - exact).abs() <= 0.02 * exact,
            "quadrature {quad} vs exact {exact}"
        );
    }
}
