//! Stochastic exponential-Euler time stepping.
//!
//! One scheme drives every system in the library: the linear semigroup and
//! the additive stochastic convolution are treated exactly per mode, the
//! nonlinearity explicitly at the left endpoint.  On the purely linear
//! homogeneous problem the integrator is exact regardless of step count, and
//! the stiff `1/eps` part of the fast equation never restricts the step.
//!
//! A single uniform step advances both components of the coupled system; the
//! default coupled step is `min(h_macro, eps/20)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{apply_f, apply_g, DriftAverage, DriftAverageJacobian, ModelSpec};
use crate::noise::{NoiseStream, ProcessTag, StreamFamily};
use crate::spectral::{exp_euler_weight, SpectralField, SpectralOperatorParams};

/// State of the coupled slow-fast pair.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub x: SpectralField,
    pub y: SpectralField,
    pub t: f64,
}

impl CoupledState {
    pub fn new(x: SpectralField, y: SpectralField) -> Result<Self> {
        x.check_same_geometry(&y, "coupled state")?;
        Ok(Self { x, y, t: 0.0 })
    }
}

/// Discretization and sampling parameters for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub epsilon: f64,
    /// Horizon `T`.
    pub t_horizon: f64,
    /// Step for standalone slow/averaged/frozen systems.
    pub h_macro: f64,
    /// Step for the coupled system; defaults to `min(h_macro, eps/20)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_coupled: Option<f64>,
    /// Galerkin mode count.
    pub n_modes: usize,
    /// Monte-Carlo sample count.
    pub n_samples: usize,
    pub seed: u64,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(invalid(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.t_horizon > 0.0) {
            return Err(invalid("horizon T must be positive"));
        }
        if !(self.h_macro > 0.0 && self.h_macro <= self.t_horizon) {
            return Err(invalid("need 0 < h_macro <= T"));
        }
        if let Some(h) = self.h_coupled {
            if !(h > 0.0 && h <= self.h_macro) {
                return Err(invalid("need 0 < h_coupled <= h_macro"));
            }
        }
        if self.n_modes == 0 {
            return Err(invalid("mode count must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(invalid("sample count must be >= 1"));
        }
        Ok(())
    }

    /// Coupled step for scale parameter `eps`, before grid rounding.
    pub fn coupled_step(&self, eps: f64) -> f64 {
        self.h_coupled
            .unwrap_or(f64::INFINITY)
            .min(self.h_macro)
            .min(eps / 20.0)
    }

    pub fn with_epsilon(&self, eps: f64) -> SimParams {
        SimParams {
            epsilon: eps,
            ..self.clone()
        }
    }
}

/// Rounds `h` down so the horizon is an integer number of steps.
pub fn step_grid(t_horizon: f64, h: f64) -> (usize, f64) {
    let steps = (t_horizon / h - 1e-9).ceil().max(1.0) as usize;
    (steps, t_horizon / steps as f64)
}

/// Per-mode tables for one exponential-Euler step size.
struct ModeTables {
    /// `exp(-alpha_k h / scale)`
    decay: Vec<f64>,
    /// drift weight: `exp_euler_weight(alpha_k, h, scale) / scale`
    /// (the `1/scale` prefactor of the fast drift is folded in)
    weight: Vec<f64>,
    /// noise standard deviation per mode
    noise_sd: Vec<f64>,
}

impl ModeTables {
    /// `scale = 1, sigma = sigma1, q = q1` for slow/averaged systems;
    /// `scale = eps (fast flag), sigma = sigma2, q = q2` for the fast system.
    fn build(
        params: &SpectralOperatorParams,
        q_lambdas: &[f64],
        sigma: f64,
        h: f64,
        scale: f64,
        fast: bool,
    ) -> Result<Self> {
        let n = params.n;
        let mut decay = vec![0.0; n];
        let mut weight = vec![0.0; n];
        let mut noise_sd = vec![0.0; n];
        for k in 1..=n {
            let alpha = params.alpha(k);
            decay[k - 1] = (-alpha * h / scale).exp();
            weight[k - 1] = exp_euler_weight(alpha, h, scale)? / if fast { scale } else { 1.0 };
            noise_sd[k - 1] =
                crate::noise::stoch_conv_variance(alpha, sigma, q_lambdas[k - 1], h, scale, fast)
                    .sqrt();
        }
        Ok(Self {
            decay,
            weight,
            noise_sd,
        })
    }

    /// `out_k = decay_k z_k + weight_k drift_k + noise_sd_k xi_k`
    fn advance(&self, z: &mut [f64], drift: &[f64], xi: &[f64]) {
        for k in 0..z.len() {
            z[k] = self.decay[k] * z[k] + self.weight[k] * drift[k] + self.noise_sd[k] * xi[k];
        }
    }
}

/// Reusable stepper for the coupled system at a fixed step size.
pub struct CoupledStepper<'a> {
    spec: &'a ModelSpec,
    slow: ModeTables,
    fast: ModeTables,
    h: f64,
    xi: Vec<f64>,
}

impl<'a> CoupledStepper<'a> {
    pub fn new(spec: &'a ModelSpec, n: usize, h: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        let params = spec.operator_params(n)?;
        let slow = ModeTables::build(&params, &spec.q1.lambdas(n), spec.sigma1, h, 1.0, false)?;
        let fast = ModeTables::build(&params, &spec.q2.lambdas(n), spec.sigma2, h, eps, true)?;
        Ok(Self {
            spec,
            slow,
            fast,
            h,
            xi: vec![0.0; n],
        })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// One step; drift evaluated at the pre-step state.  Consumes `n` draws
    /// from each of `w1` and `w2`.
    pub fn step(
        &mut self,
        state: &mut CoupledState,
        w1: &mut NoiseStream,
        w2: &mut NoiseStream,
    ) -> Result<()> {
        let f = apply_f(self.spec, &state.x, &state.y)?;
        let g = apply_g(self.spec, &state.x, &state.y)?;
        w1.fill_normals(&mut self.xi);
        self.slow
            .advance(state.x.coeffs_mut(), f.coeffs(), &self.xi);
        w2.fill_normals(&mut self.xi);
        self.fast
            .advance(state.y.coeffs_mut(), g.coeffs(), &self.xi);
        state.t += self.h;
        Ok(())
    }

    /// One step that also advances an averaged path on the same grid with the
    /// identical `W1` draw (common-random-number coupling).
    pub fn step_with_averaged(
        &mut self,
        state: &mut CoupledState,
        xbar: &mut SpectralField,
        fbar: &mut dyn DriftAverage,
        w1: &mut NoiseStream,
        w2: &mut NoiseStream,
    ) -> Result<()> {
        let f = apply_f(self.spec, &state.x, &state.y)?;
        let g = apply_g(self.spec, &state.x, &state.y)?;
        let fb = fbar.fbar(xbar)?;
        w1.fill_normals(&mut self.xi);
        self.slow
            .advance(state.x.coeffs_mut(), f.coeffs(), &self.xi);
        self.slow.advance(xbar.coeffs_mut(), fb.coeffs(), &self.xi);
        w2.fill_normals(&mut self.xi);
        self.fast
            .advance(state.y.coeffs_mut(), g.coeffs(), &self.xi);
        state.t += self.h;
        Ok(())
    }
}

/// Stepper for the frozen fast equation (the `eps`-free equation with the
/// slow variable held fixed).
pub struct FrozenStepper<'a> {
    spec: &'a ModelSpec,
    x_frozen: SpectralField,
    tables: ModeTables,
    h: f64,
    xi: Vec<f64>,
}

impl<'a> FrozenStepper<'a> {
    pub fn new(spec: &'a ModelSpec, x_frozen: SpectralField, h: f64) -> Result<Self> {
        let n = x_frozen.n();
        let params = spec.operator_params(n)?;
        let tables = ModeTables::build(&params, &spec.q2.lambdas(n), spec.sigma2, h, 1.0, false)?;
        Ok(Self {
            spec,
            x_frozen,
            tables,
            h,
            xi: vec![0.0; n],
        })
    }

    pub fn step(&mut self, y: &mut SpectralField, w2: &mut NoiseStream) -> Result<()> {
        let g = apply_g(self.spec, &self.x_frozen, y)?;
        w2.fill_normals(&mut self.xi);
        self.tables.advance(y.coeffs_mut(), g.coeffs(), &self.xi);
        Ok(())
    }

    pub fn x_frozen(&self) -> &SpectralField {
        &self.x_frozen
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }
}

/// Stepper for the averaged equation.
pub struct AveragedStepper<'a> {
    spec: &'a ModelSpec,
    tables: ModeTables,
    h: f64,
    xi: Vec<f64>,
}

impl<'a> AveragedStepper<'a> {
    pub fn new(spec: &'a ModelSpec, n: usize, h: f64) -> Result<Self> {
        let params = spec.operator_params(n)?;
        let tables = ModeTables::build(&params, &spec.q1.lambdas(n), spec.sigma1, h, 1.0, false)?;
        Ok(Self {
            spec,
            tables,
            h,
            xi: vec![0.0; n],
        })
    }

    pub fn step(
        &mut self,
        x: &mut SpectralField,
        fbar: &mut dyn DriftAverage,
        w1: &mut NoiseStream,
    ) -> Result<()> {
        let fb = fbar.fbar(x)?;
        w1.fill_normals(&mut self.xi);
        self.tables.advance(x.coeffs_mut(), fb.coeffs(), &self.xi);
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }
}

/// Deterministic first-variation process along an averaged path.
#[derive(Debug, Clone)]
pub struct VariationState {
    pub eta: SpectralField,
}

impl VariationState {
    /// Starts from the direction `h`.
    pub fn new(direction: SpectralField) -> Self {
        Self { eta: direction }
    }
}

/// One exponential-Euler step of the first-variation equation
/// `d eta = (A eta + Fbar'(Xbar_t) eta) dt` (no noise term).
pub fn step_first_variation(
    v: &mut VariationState,
    xbar_t: &SpectralField,
    jacobian: &mut dyn DriftAverageJacobian,
    h: f64,
) -> Result<()> {
    if !(h > 0.0) {
        return Err(invalid("step must be positive"));
    }
    let params = v.eta.operator_params();
    let jv = jacobian.apply(xbar_t, &v.eta)?;
    let coeffs = v.eta.coeffs_mut();
    for k in 1..=params.n {
        let alpha = params.alpha(k);
        let w = exp_euler_weight(alpha, h, 1.0)?;
        coeffs[k - 1] = (-alpha * h).exp() * coeffs[k - 1] + w * jv.coeff(k);
    }
    Ok(())
}

/// Single-step convenience wrappers over the steppers.
pub fn step_coupled(
    state: &CoupledState,
    spec: &ModelSpec,
    params: &SimParams,
    w1: &mut NoiseStream,
    w2: &mut NoiseStream,
) -> Result<CoupledState> {
    let h = params.coupled_step(params.epsilon);
    let mut stepper = CoupledStepper::new(spec, state.x.n(), h, params.epsilon)?;
    let mut next = state.clone();
    stepper.step(&mut next, w1, w2)?;
    Ok(next)
}

pub fn step_frozen(
    y: &SpectralField,
    x_frozen: &SpectralField,
    spec: &ModelSpec,
    h: f64,
    w2: &mut NoiseStream,
) -> Result<SpectralField> {
    let mut stepper = FrozenStepper::new(spec, x_frozen.clone(), h)?;
    let mut out = y.clone();
    stepper.step(&mut out, w2)?;
    Ok(out)
}

pub fn step_averaged(
    x: &SpectralField,
    fbar: &mut dyn DriftAverage,
    spec: &ModelSpec,
    h: f64,
    w1: &mut NoiseStream,
) -> Result<SpectralField> {
    let mut stepper = AveragedStepper::new(spec, x.n(), h)?;
    let mut out = x.clone();
    stepper.step(&mut out, fbar, w1)?;
    Ok(out)
}

/// Which system a terminal-value simulation advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Coupled,
    Averaged,
    Frozen,
}

/// Terminal fields of one sample path.
#[derive(Debug, Clone)]
pub struct TerminalState {
    pub x: Option<SpectralField>,
    pub y: Option<SpectralField>,
}

/// Simulate one path to the horizon and return its terminal field(s).
///
/// `coupled` returns both components (step `h_coupled`); `averaged` returns
/// the slow field only (closed-form averaged drift, step `h_macro`);
/// `frozen` holds the slow component at `x0` and returns the fast field
/// (step `h_macro`).
pub fn simulate_terminal(
    kind: SimKind,
    spec: &ModelSpec,
    params: &SimParams,
    x0: &SpectralField,
    y0: &SpectralField,
    family: &StreamFamily,
    sample_index: u64,
) -> Result<TerminalState> {
    params.validate()?;
    match kind {
        SimKind::Coupled => {
            let (steps, h) = step_grid(params.t_horizon, params.coupled_step(params.epsilon));
            let mut stepper = CoupledStepper::new(spec, x0.n(), h, params.epsilon)?;
            let mut w1 = family.stream(sample_index, ProcessTag::W1);
            let mut w2 = family.stream(sample_index, ProcessTag::W2);
            let mut state = CoupledState::new(x0.clone(), y0.clone())?;
            for _ in 0..steps {
                stepper.step(&mut state, &mut w1, &mut w2)?;
            }
            Ok(TerminalState {
                x: Some(state.x),
                y: Some(state.y),
            })
        }
        SimKind::Averaged => {
            let (steps, h) = step_grid(params.t_horizon, params.h_macro);
            let mut stepper = AveragedStepper::new(spec, x0.n(), h)?;
            let mut fbar = crate::models::ClosedFormFbar::new(spec)?;
            let mut w1 = family.stream(sample_index, ProcessTag::W1);
            let mut x = x0.clone();
            for _ in 0..steps {
                stepper.step(&mut x, &mut fbar, &mut w1)?;
            }
            Ok(TerminalState {
                x: Some(x),
                y: None,
            })
        }
        SimKind::Frozen => {
            let (steps, h) = step_grid(params.t_horizon, params.h_macro);
            let mut stepper = FrozenStepper::new(spec, x0.clone(), h)?;
            let mut w2 = family.stream(sample_index, ProcessTag::W2);
            let mut y = y0.clone();
            for _ in 0..steps {
                stepper.step(&mut y, &mut w2)?;
            }
            Ok(TerminalState {
                x: None,
                y: Some(y),
            })
        }
    }
}

/// Terminal slow fields of the coupled system and the averaged system driven
/// by the same `W1` draws on the same step grid.  This is the
/// common-random-number pair behind every weak-error estimate.
pub fn simulate_coupled_averaged_pair(
    spec: &ModelSpec,
    params: &SimParams,
    x0: &SpectralField,
    y0: &SpectralField,
    family: &StreamFamily,
    sample_index: u64,
) -> Result<(SpectralField, SpectralField)> {
    params.validate()?;
    let (steps, h) = step_grid(params.t_horizon, params.coupled_step(params.epsilon));
    let mut stepper = CoupledStepper::new(spec, x0.n(), h, params.epsilon)?;
    let mut fbar = crate::models::ClosedFormFbar::new(spec)?;
    let mut w1 = family.stream(sample_index, ProcessTag::W1);
    let mut w2 = family.stream(sample_index, ProcessTag::W2);
    let mut state = CoupledState::new(x0.clone(), y0.clone())?;
    let mut xbar = x0.clone();
    for _ in 0..steps {
        stepper.step_with_averaged(&mut state, &mut xbar, &mut fbar, &mut w1, &mut w2)?;
    }
    Ok((state.x, xbar))
}

/// Same pair with a caller-supplied averaged-drift provider (needed for
/// drift families without a closed-form average).
pub fn simulate_pair_with_fbar(
    spec: &ModelSpec,
    params: &SimParams,
    x0: &SpectralField,
    y0: &SpectralField,
    fbar: &mut dyn DriftAverage,
    family: &StreamFamily,
    sample_index: u64,
) -> Result<(SpectralField, SpectralField)> {
    params.validate()?;
    let (steps, h) = step_grid(params.t_horizon, params.coupled_step(params.epsilon));
    let mut stepper = CoupledStepper::new(spec, x0.n(), h, params.epsilon)?;
    let mut w1 = family.stream(sample_index, ProcessTag::W1);
    let mut w2 = family.stream(sample_index, ProcessTag::W2);
    let mut state = CoupledState::new(x0.clone(), y0.clone())?;
    let mut xbar = x0.clone();
    for _ in 0..steps {
        stepper.step_with_averaged(&mut state, &mut xbar, fbar, &mut w1, &mut w2)?;
    }
    Ok((state.x, xbar))
}

/// Slow component of one coupled path recorded at the requested times
/// (snapped down to the step grid).
pub fn simulate_coupled_snapshots(
    spec: &ModelSpec,
    params: &SimParams,
    x0: &SpectralField,
    y0: &SpectralField,
    family: &StreamFamily,
    sample_index: u64,
    times: &[f64],
) -> Result<Vec<SpectralField>> {
    params.validate()?;
    let (steps, h) = step_grid(params.t_horizon, params.coupled_step(params.epsilon));
    let mut stepper = CoupledStepper::new(spec, x0.n(), h, params.epsilon)?;
    let mut w1 = family.stream(sample_index, ProcessTag::W1);
    let mut w2 = family.stream(sample_index, ProcessTag::W2);
    let mut state = CoupledState::new(x0.clone(), y0.clone())?;
    let snap_steps: Vec<usize> = times
        .iter()
        .map(|t| ((t / h).round() as usize).min(steps))
        .collect();
    let mut out = Vec::with_capacity(times.len());
    for idx in &snap_steps {
        if *idx == 0 {
            out.push(state.x.clone());
        }
    }
    for step in 1..=steps {
        stepper.step(&mut state, &mut w1, &mut w2)?;
        for idx in &snap_steps {
            if *idx == step {
                out.push(state.x.clone());
            }
        }
    }
    Ok(out)
}
