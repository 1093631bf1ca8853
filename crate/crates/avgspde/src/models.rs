//! Drift pairs `(F, G)`, covariance specifications for the two noises, and
//! bounded test functions, together with the hypothesis validation that every
//! experiment runs before touching an integrator.
//!
//! Two drift families are built in.  The LINEAR family is mode-diagonal, so
//! the frozen fast process is an explicit product Ornstein-Uhlenbeck process
//! and the averaged drift has a closed form; it is the oracle backbone of the
//! whole test suite.  The NEMYTSKII family applies bounded-derivative scalar
//! maps pointwise via the sine collocation grid.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::spectral::{
    eigenvalue, sine_analysis, sine_synthesis, SpectralField, SpectralOperatorParams,
};

/// Per-mode coefficient: either one value broadcast to every mode or an
/// explicit list (index `k-1` holds mode `k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coeff {
    Uniform(f64),
    PerMode(Vec<f64>),
}

impl Coeff {
    pub fn zero() -> Self {
        Coeff::Uniform(0.0)
    }

    /// Value at 1-based mode index `k`; per-mode lists are zero-extended.
    pub fn at(&self, k: usize) -> f64 {
        match self {
            Coeff::Uniform(v) => *v,
            Coeff::PerMode(v) => v.get(k - 1).copied().unwrap_or(0.0),
        }
    }

    pub fn max_abs(&self, n: usize) -> f64 {
        (1..=n).map(|k| self.at(k).abs()).fold(0.0, f64::max)
    }

    pub fn min(&self, n: usize) -> f64 {
        (1..=n).map(|k| self.at(k)).fold(f64::INFINITY, f64::min)
    }

    fn finite(&self) -> bool {
        match self {
            Coeff::Uniform(v) => v.is_finite(),
            Coeff::PerMode(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Diagonal covariance operator `Q e_k = lambda_k e_k` given by a named rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    /// `lambda_k = c` for every mode.
    Constant { c: f64 },
    /// `lambda_k = c k^{-p}`.
    Power { c: f64, p: f64 },
}

impl CovarianceSpec {
    pub fn lambda(&self, k: usize) -> f64 {
        match self {
            CovarianceSpec::Constant { c } => *c,
            CovarianceSpec::Power { c, p } => c * (k as f64).powf(-p),
        }
    }

    pub fn lambdas(&self, n: usize) -> Vec<f64> {
        (1..=n).map(|k| self.lambda(k)).collect()
    }

    /// Partial trace `sum_{k<=n} lambda_k`.
    pub fn partial_trace(&self, n: usize) -> f64 {
        (1..=n).map(|k| self.lambda(k)).sum()
    }

    /// Partial trace of `(-A) Q`: `sum_{k<=n} lambda_k alpha_k`.
    pub fn partial_trace_a(&self, n: usize, length_l: f64) -> f64 {
        (1..=n)
            .map(|k| self.lambda(k) * eigenvalue(k, length_l).unwrap())
            .sum()
    }

    pub fn nonnegative(&self) -> bool {
        match self {
            CovarianceSpec::Constant { c } => *c >= 0.0,
            CovarianceSpec::Power { c, .. } => *c >= 0.0,
        }
    }

    /// Whether `sum_k lambda_k alpha_k` stays bounded as the truncation grows
    /// (`alpha_k ~ k^2`, so power rules need `p > 3`).
    pub fn trace_a_bounded(&self) -> bool {
        match self {
            CovarianceSpec::Constant { c } => *c == 0.0,
            CovarianceSpec::Power { c, p } => *c == 0.0 || *p > 3.0,
        }
    }

    /// Whether `sum_k lambda_k` stays bounded as the truncation grows.
    pub fn trace_bounded(&self) -> bool {
        match self {
            CovarianceSpec::Constant { c } => *c == 0.0,
            CovarianceSpec::Power { c, p } => *c == 0.0 || *p > 1.0,
        }
    }
}

/// Mode-diagonal affine drift pair:
/// `F_k(x, y) = a_k x_k + b_k y_k + f0_k`,
/// `G_k(x, y) = g_k x_k - c_k y_k + g0_k` with `c_k >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDrift {
    pub a: Coeff,
    pub b: Coeff,
    #[serde(default = "Coeff::zero")]
    pub f0: Coeff,
    pub g: Coeff,
    pub c: Coeff,
    #[serde(default = "Coeff::zero")]
    pub g0: Coeff,
}

/// One term of a bounded-derivative scalar map `(u, v) -> amp * base(cu*u + cv*v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarTerm {
    Sin { amp: f64, cu: f64, cv: f64 },
    Tanh { amp: f64, cu: f64, cv: f64 },
    Linear { cu: f64, cv: f64 },
    Const { amp: f64 },
}

impl ScalarTerm {
    fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            ScalarTerm::Sin { amp, cu, cv } => amp * (cu * u + cv * v).sin(),
            ScalarTerm::Tanh { amp, cu, cv } => amp * (cu * u + cv * v).tanh(),
            ScalarTerm::Linear { cu, cv } => cu * u + cv * v,
            ScalarTerm::Const { amp } => *amp,
        }
    }

    /// (sup |d/du|, sup |d/dv|)
    fn derivative_bounds(&self) -> (f64, f64) {
        match self {
            ScalarTerm::Sin { amp, cu, cv } | ScalarTerm::Tanh { amp, cu, cv } => {
                (amp.abs() * cu.abs(), amp.abs() * cv.abs())
            }
            ScalarTerm::Linear { cu, cv } => (cu.abs(), cv.abs()),
            ScalarTerm::Const { .. } => (0.0, 0.0),
        }
    }
}

/// Sum of [`ScalarTerm`]s, applied pointwise on the collocation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarMap {
    pub terms: Vec<ScalarTerm>,
}

impl ScalarMap {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(u, v)).sum()
    }

    /// (sup |d/du|, sup |d/dv|), summed over terms.
    pub fn derivative_bounds(&self) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(du, dv), t| {
            let (a, b) = t.derivative_bounds();
            (du + a, dv + b)
        })
    }
}

/// Pointwise (Nemytskii) drift pair `F(x,y)(xi) = f(x(xi), y(xi))`, evaluated
/// pseudo-spectrally on a grid of `grid_factor * n` interior points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NemytskiiDrift {
    pub f: ScalarMap,
    pub g: ScalarMap,
    #[serde(default = "default_grid_factor")]
    pub grid_factor: usize,
}

fn default_grid_factor() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftModel {
    Linear(LinearDrift),
    Nemytskii(NemytskiiDrift),
}

impl DriftModel {
    pub fn is_linear(&self) -> bool {
        matches!(self, DriftModel::Linear(_))
    }

    /// Lipschitz constant of `F` in the sense
    /// `||F(x1,y1) - F(x2,y2)|| <= K_F (||x1-x2|| + ||y1-y2||)`.
    pub fn k_f(&self, n: usize) -> f64 {
        match self {
            DriftModel::Linear(d) => (1..=n)
                .map(|k| d.a.at(k).abs() + d.b.at(k).abs())
                .fold(0.0, f64::max),
            DriftModel::Nemytskii(d) => {
                let (du, dv) = d.f.derivative_bounds();
                du + dv
            }
        }
    }

    pub fn k_g(&self, n: usize) -> f64 {
        match self {
            DriftModel::Linear(d) => (1..=n)
                .map(|k| d.g.at(k).abs() + d.c.at(k).abs())
                .fold(0.0, f64::max),
            DriftModel::Nemytskii(d) => {
                let (du, dv) = d.g.derivative_bounds();
                du + dv
            }
        }
    }

    /// Bound on the operator norm of `G'_v` (the dissipativity constant).
    pub fn l_g(&self, n: usize) -> f64 {
        match self {
            DriftModel::Linear(d) => d.c.max_abs(n),
            DriftModel::Nemytskii(d) => d.g.derivative_bounds().1,
        }
    }
}

/// Full model: drift pair, the two noise covariances and strengths, geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub length_l: f64,
    pub drift: DriftModel,
    pub q1: CovarianceSpec,
    pub q2: CovarianceSpec,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl ModelSpec {
    pub fn operator_params(&self, n: usize) -> Result<SpectralOperatorParams> {
        SpectralOperatorParams::new(self.length_l, n)
    }

    pub fn is_linear(&self) -> bool {
        self.drift.is_linear()
    }

    pub fn linear(&self) -> Result<&LinearDrift> {
        match &self.drift {
            DriftModel::Linear(d) => Ok(d),
            DriftModel::Nemytskii(_) => Err(SimError::UnsupportedOperation(
                "operation requires the LINEAR drift family".into(),
            )),
        }
    }

    /// Stationary mean of the frozen fast mode `k`:
    /// `m_k(x) = (g_k x_k + g0_k) / (alpha_k + c_k)` (LINEAR only).
    pub fn frozen_mean(&self, x: &SpectralField) -> Result<SpectralField> {
        let d = self.linear()?;
        let params = x.operator_params();
        let coeffs = (1..=x.n())
            .map(|k| (d.g.at(k) * x.coeff(k) + d.g0.at(k)) / (params.alpha(k) + d.c.at(k)))
            .collect();
        SpectralField::new(coeffs, x.length_l())
    }

    /// Stationary variance of the frozen fast mode `k`:
    /// `sigma2^2 lambda_{2,k} / (2 (alpha_k + c_k))` (LINEAR only).
    pub fn frozen_variance(&self, n: usize) -> Result<Vec<f64>> {
        let d = self.linear()?;
        let params = self.operator_params(n)?;
        Ok((1..=n)
            .map(|k| {
                self.sigma2 * self.sigma2 * self.q2.lambda(k)
                    / (2.0 * (params.alpha(k) + d.c.at(k)))
            })
            .collect())
    }
}

/// Outcome of one hypothesis check.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Validation report for (H.1)/(H.2) and the trace conditions, with the
/// derived constants used downstream.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    pub alpha1: f64,
    pub l_g: f64,
    /// Dissipativity margin `beta = alpha_1 - L_g`; the guaranteed mixing rate.
    pub beta: f64,
    pub k_f: f64,
    pub k_g: f64,
    pub trace_q1: f64,
    pub trace_q2: f64,
    pub trace_a_q1: f64,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&HypothesisCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Check the standing hypotheses at truncation level `n`: `L_g < alpha_1`,
/// nonnegative covariance eigenvalues, finite traces `Tr(Q_i)` and the
/// stronger `Tr((-A) Q_1)` condition on the slow noise.
pub fn validate_hypotheses(spec: &ModelSpec, n: usize) -> Result<HypothesisReport> {
    let params = spec.operator_params(n)?;
    let alpha1 = params.alpha1();
    let l_g = spec.drift.l_g(n);
    let beta = alpha1 - l_g;
    let mut checks = Vec::new();

    checks.push(HypothesisCheck {
        name: "dissipativity L_g < alpha_1".into(),
        passed: l_g < alpha1,
        detail: format!("L_g = {l_g}, alpha_1 = {alpha1}, beta = {beta}"),
    });

    checks.push(HypothesisCheck {
        name: "lambda sequences nonnegative".into(),
        passed: spec.q1.nonnegative() && spec.q2.nonnegative(),
        detail: format!("q1 = {:?}, q2 = {:?}", spec.q1, spec.q2),
    });

    let trace_q1 = spec.q1.partial_trace(n);
    let trace_q2 = spec.q2.partial_trace(n);
    checks.push(HypothesisCheck {
        name: "Tr(Q_1), Tr(Q_2) bounded in the truncation limit".into(),
        passed: spec.q1.trace_bounded() && spec.q2.trace_bounded(),
        detail: format!("Tr(Q_1)|_n = {trace_q1}, Tr(Q_2)|_n = {trace_q2}"),
    });

    let trace_a_q1 = spec.q1.partial_trace_a(n, spec.length_l);
    checks.push(HypothesisCheck {
        name: "Tr((-A) Q_1) bounded in the truncation limit".into(),
        passed: spec.q1.trace_a_bounded(),
        detail: format!("Tr((-A)Q_1)|_n = {trace_a_q1}"),
    });

    checks.push(HypothesisCheck {
        name: "noise strengths nonnegative and finite".into(),
        passed: spec.sigma1 >= 0.0
            && spec.sigma2 >= 0.0
            && spec.sigma1.is_finite()
            && spec.sigma2.is_finite(),
        detail: format!("sigma1 = {}, sigma2 = {}", spec.sigma1, spec.sigma2),
    });

    if let DriftModel::Linear(d) = &spec.drift {
        checks.push(HypothesisCheck {
            name: "fast damping coefficients c_k >= 0".into(),
            passed: d.c.min(n) >= 0.0,
            detail: format!("min c_k = {}", d.c.min(n)),
        });
        let all_finite = [&d.a, &d.b, &d.f0, &d.g, &d.c, &d.g0]
            .iter()
            .all(|c| c.finite());
        checks.push(HypothesisCheck {
            name: "drift coefficients finite".into(),
            passed: all_finite,
            detail: String::new(),
        });
    }

    Ok(HypothesisReport {
        checks,
        alpha1,
        l_g,
        beta,
        k_f: spec.drift.k_f(n),
        k_g: spec.drift.k_g(n),
        trace_q1,
        trace_q2,
        trace_a_q1,
    })
}

/// Validate and reject: experiment constructors call this to refuse specs
/// that fail any hypothesis.
pub fn require_valid(spec: &ModelSpec, n: usize) -> Result<HypothesisReport> {
    let report = validate_hypotheses(spec, n)?;
    if !report.passed() {
        let names: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        return Err(SimError::Validation(format!(
            "hypothesis validation failed: {}",
            names.join("; ")
        )));
    }
    Ok(report)
}

fn nemytskii_apply(
    map: &ScalarMap,
    grid_factor: usize,
    x: &SpectralField,
    y: &SpectralField,
) -> Result<SpectralField> {
    let n = x.n();
    let grid = (grid_factor.max(1)) * n;
    let xs = sine_synthesis(x, grid)?;
    let ys = sine_synthesis(y, grid)?;
    let vals: Vec<f64> = xs.iter().zip(&ys).map(|(u, v)| map.eval(*u, *v)).collect();
    sine_analysis(&vals, x.length_l(), n)
}

/// Slow drift `F(x, y)`.
pub fn apply_f(spec: &ModelSpec, x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
    x.check_same_geometry(y, "apply_f")?;
    match &spec.drift {
        DriftModel::Linear(d) => {
            let coeffs = (1..=x.n())
                .map(|k| d.a.at(k) * x.coeff(k) + d.b.at(k) * y.coeff(k) + d.f0.at(k))
                .collect();
            SpectralField::new(coeffs, x.length_l())
        }
        DriftModel::Nemytskii(d) => nemytskii_apply(&d.f, d.grid_factor, x, y),
    }
}

/// Fast drift `G(x, y)`.
pub fn apply_g(spec: &ModelSpec, x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
    x.check_same_geometry(y, "apply_g")?;
    match &spec.drift {
        DriftModel::Linear(d) => {
            let coeffs = (1..=x.n())
                .map(|k| d.g.at(k) * x.coeff(k) - d.c.at(k) * y.coeff(k) + d.g0.at(k))
                .collect();
            SpectralField::new(coeffs, x.length_l())
        }
        DriftModel::Nemytskii(d) => nemytskii_apply(&d.g, d.grid_factor, x, y),
    }
}

/// Closed-form averaged drift for the LINEAR family:
/// `Fbar_k(x) = a_k x_k + b_k m_k(x) + f0_k` with `m_k` the stationary mean
/// of the frozen fast mode.
pub fn fbar_closed_form(spec: &ModelSpec, x: &SpectralField) -> Result<SpectralField> {
    let d = spec.linear()?;
    let m = spec.frozen_mean(x)?;
    let coeffs = (1..=x.n())
        .map(|k| d.a.at(k) * x.coeff(k) + d.b.at(k) * m.coeff(k) + d.f0.at(k))
        .collect();
    SpectralField::new(coeffs, x.length_l())
}

/// Diagonal Jacobian of the closed-form averaged drift:
/// `rho_k = a_k + b_k g_k / (alpha_k + c_k)` (LINEAR only).
pub fn fbar_jacobian_diag(spec: &ModelSpec, n: usize) -> Result<Vec<f64>> {
    let d = spec.linear()?;
    let params = spec.operator_params(n)?;
    Ok((1..=n)
        .map(|k| d.a.at(k) + d.b.at(k) * d.g.at(k) / (params.alpha(k) + d.c.at(k)))
        .collect())
}

/// Provider of the averaged drift `Fbar`, either closed-form or estimated.
pub trait DriftAverage {
    fn fbar(&mut self, x: &SpectralField) -> Result<SpectralField>;
}

/// Closed-form provider for LINEAR specs.
pub struct ClosedFormFbar<'a> {
    spec: &'a ModelSpec,
}

impl<'a> ClosedFormFbar<'a> {
    pub fn new(spec: &'a ModelSpec) -> Result<Self> {
        spec.linear()?;
        Ok(Self { spec })
    }
}

impl DriftAverage for ClosedFormFbar<'_> {
    fn fbar(&mut self, x: &SpectralField) -> Result<SpectralField> {
        fbar_closed_form(self.spec, x)
    }
}

/// Directional derivative provider for `Fbar'(x) . h`.
pub trait DriftAverageJacobian {
    fn apply(&mut self, x: &SpectralField, h: &SpectralField) -> Result<SpectralField>;
}

/// Exact diagonal Jacobian for LINEAR specs.
pub struct ClosedFormFbarJacobian {
    diag: Vec<f64>,
    length_l: f64,
}

impl ClosedFormFbarJacobian {
    pub fn new(spec: &ModelSpec, n: usize) -> Result<Self> {
        Ok(Self {
            diag: fbar_jacobian_diag(spec, n)?,
            length_l: spec.length_l,
        })
    }
}

impl DriftAverageJacobian for ClosedFormFbarJacobian {
    fn apply(&mut self, _x: &SpectralField, h: &SpectralField) -> Result<SpectralField> {
        let coeffs = self
            .diag
            .iter()
            .zip(h.coeffs())
            .map(|(d, hk)| d * hk)
            .collect();
        SpectralField::new(coeffs, self.length_l)
    }
}

/// Central finite difference of any `Fbar` provider, with step
/// `delta = 1e-5 (1 + ||x||)` along the normalized direction.
pub struct FiniteDiffFbarJacobian<P: DriftAverage> {
    pub provider: P,
}

impl<P: DriftAverage> DriftAverageJacobian for FiniteDiffFbarJacobian<P> {
    fn apply(&mut self, x: &SpectralField, h: &SpectralField) -> Result<SpectralField> {
        let norm_h = h.l2_norm();
        if norm_h == 0.0 {
            return Ok(SpectralField::zero(h.n(), h.length_l()));
        }
        let delta = 1e-5 * (1.0 + x.l2_norm());
        let unit = h.scaled(1.0 / norm_h);
        let plus = self.provider.fbar(&x.add(&unit.scaled(delta))?)?;
        let minus = self.provider.fbar(&x.sub(&unit.scaled(delta))?)?;
        Ok(plus.sub(&minus)?.scaled(norm_h / (2.0 * delta)))
    }
}

/// Bounded C^3 test function for weak-error functionals.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `phi(x) = cos((x, v))` for a fixed direction field `v`.
    Cosine { direction: SpectralField },
    /// `phi(x) = 1 / (1 + ||x||^2)`.
    Rational,
}

impl TestFunction {
    pub fn cosine(direction: SpectralField) -> Self {
        TestFunction::Cosine { direction }
    }

    pub fn phi_eval(&self, x: &SpectralField) -> Result<f64> {
        match self {
            TestFunction::Cosine { direction } => Ok(direction.inner(x)?.cos()),
            TestFunction::Rational => {
                let n2 = x.l2_norm().powi(2);
                Ok(1.0 / (1.0 + n2))
            }
        }
    }

    pub fn phi_grad(&self, x: &SpectralField) -> Result<SpectralField> {
        match self {
            TestFunction::Cosine { direction } => {
                let s = direction.inner(x)?;
                Ok(direction.scaled(-s.sin()))
            }
            TestFunction::Rational => {
                let n2 = x.l2_norm().powi(2);
                let denom = (1.0 + n2) * (1.0 + n2);
                Ok(x.scaled(-2.0 / denom))
            }
        }
    }

    /// Supremum of `||phi'||` over the state space.
    pub fn sup_grad_norm(&self) -> f64 {
        match self {
            TestFunction::Cosine { direction } => direction.l2_norm(),
            // max of 2r/(1+r^2)^2 over r >= 0, attained at r = 1/sqrt(3)
            TestFunction::Rational => 3.0 * 3.0f64.sqrt() / 8.0,
        }
    }
}
