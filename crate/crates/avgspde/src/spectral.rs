//! Dirichlet-Laplacian eigenbasis on the interval `[0, l]`.
//!
//! Everything downstream works with coefficient vectors in the orthonormal
//! sine basis `e_k(xi) = sqrt(2/l) sin(k pi xi / l)`, `k = 1, 2, ...`, whose
//! eigenvalues under `-d^2/dxi^2` are `alpha_k = (k pi / l)^2`.  We use the
//! positive, strictly increasing convention for `alpha_k` throughout (all
//! decay estimates require `alpha_1 > 0`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Eigenvalue `alpha_k = (k pi / l)^2` of the Dirichlet Laplacian, `k >= 1`.
pub fn eigenvalue(k: usize, length_l: f64) -> Result<f64> {
    if k == 0 {
        return Err(invalid("mode index k must be >= 1"));
    }
    if !(length_l > 0.0) || !length_l.is_finite() {
        return Err(invalid(format!(
            "domain length must be positive, got {length_l}"
        )));
    }
    let w = k as f64 * std::f64::consts::PI / length_l;
    Ok(w * w)
}

/// Geometry of the truncated operator: domain length and mode count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralOperatorParams {
    pub length_l: f64,
    pub n: usize,
}

impl SpectralOperatorParams {
    pub fn new(length_l: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("mode count must be >= 1"));
        }
        eigenvalue(1, length_l)?;
        Ok(Self { length_l, n })
    }

    /// `alpha_k` for 1-based mode index `k <= n`.
    pub fn alpha(&self, k: usize) -> f64 {
        debug_assert!(k >= 1 && k <= self.n);
        let w = k as f64 * std::f64::consts::PI / self.length_l;
        w * w
    }

    /// All eigenvalues `alpha_1 ..= alpha_n`.
    pub fn alphas(&self) -> Vec<f64> {
        (1..=self.n).map(|k| self.alpha(k)).collect()
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha(1)
    }
}

/// A function on `[0, l]` represented by its coefficients in the sine basis.
///
/// Index `i` of `coeffs` holds the coefficient of `e_{i+1}`.  The L2 norm of
/// the function equals the Euclidean norm of `coeffs` (the basis is
/// orthonormal), so no quadrature is ever needed for norms or inner products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    length_l: f64,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>, length_l: f64) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(invalid("field needs at least one mode"));
        }
        if !(length_l > 0.0) || !length_l.is_finite() {
            return Err(invalid("domain length must be positive"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("field coefficients must be finite"));
        }
        Ok(Self { coeffs, length_l })
    }

    pub fn zero(n: usize, length_l: f64) -> Self {
        Self {
            coeffs: vec![0.0; n],
            length_l,
        }
    }

    /// The basis element `e_k` (1-based) as a field with `n` modes.
    pub fn basis(k: usize, n: usize, length_l: f64) -> Self {
        assert!(k >= 1 && k <= n, "basis index out of range");
        let mut coeffs = vec![0.0; n];
        coeffs[k - 1] = 1.0;
        Self { coeffs, length_l }
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    pub fn length_l(&self) -> f64 {
        self.length_l
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficient of `e_k`, 1-based.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    pub fn same_geometry(&self, other: &SpectralField) -> bool {
        self.coeffs.len() == other.coeffs.len() && self.length_l == other.length_l
    }

    pub fn check_same_geometry(&self, other: &SpectralField, what: &str) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(invalid(format!(
                "{what}: mismatched fields (n {} vs {}, l {} vs {})",
                self.n(),
                other.n(),
                self.length_l,
                other.length_l
            )));
        }
        Ok(())
    }

    /// L2 norm (= Euclidean norm of the coefficients, by Parseval).
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &SpectralField) -> Result<f64> {
        self.check_same_geometry(other, "inner product")?;
        Ok(self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn scaled(&self, s: f64) -> SpectralField {
        SpectralField {
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
            length_l: self.length_l,
        }
    }

    pub fn add(&self, other: &SpectralField) -> Result<SpectralField> {
        self.check_same_geometry(other, "field addition")?;
        Ok(SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
            length_l: self.length_l,
        })
    }

    pub fn sub(&self, other: &SpectralField) -> Result<SpectralField> {
        self.check_same_geometry(other, "field subtraction")?;
        Ok(SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
            length_l: self.length_l,
        })
    }

    pub fn operator_params(&self) -> SpectralOperatorParams {
        SpectralOperatorParams {
            length_l: self.length_l,
            n: self.coeffs.len(),
        }
    }
}

/// Analytic semigroup action: coefficient `k` is damped by `exp(-alpha_k t)`.
pub fn semigroup_apply(x: &SpectralField, t: f64) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(invalid(format!("semigroup time must be >= 0, got {t}")));
    }
    let params = x.operator_params();
    let coeffs = x
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| c * (-params.alpha(i + 1) * t).exp())
        .collect();
    Ok(SpectralField {
        coeffs,
        length_l: x.length_l(),
    })
}

/// Exact integral of the linear propagator over one step:
/// `int_0^h exp(-alpha s / scale) ds = (1 - exp(-alpha h / scale)) * scale / alpha`.
///
/// `scale = 1` for the slow and averaged systems, `scale = eps` for the fast
/// system.  Uses `exp_m1` so small `alpha h / scale` does not cancel.
pub fn exp_euler_weight(alpha: f64, h: f64, scale: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    if !(scale > 0.0) {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    if !(alpha > 0.0) {
        return Err(invalid(format!("eigenvalue must be positive, got {alpha}")));
    }
    Ok(-(-alpha * h / scale).exp_m1() * scale / alpha)
}

/// Fractional-power norm `((-A)^gamma x, x)^(1/2) = sqrt(sum alpha_k^{2 gamma} x_k^2)`.
pub fn fractional_norm(x: &SpectralField, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let params = x.operator_params();
    let sum: f64 = x
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| params.alpha(i + 1).powf(2.0 * gamma) * c * c)
        .sum();
    Ok(sum.sqrt())
}

/// Interior collocation nodes `xi_j = j l / (grid_size + 1)`, `j = 1..grid_size`.
pub fn collocation_nodes(length_l: f64, grid_size: usize) -> Vec<f64> {
    (1..=grid_size)
        .map(|j| j as f64 * length_l / (grid_size + 1) as f64)
        .collect()
}

/// Pointwise values `sum_k x_k e_k(xi_j)` on the interior collocation grid
/// (the type-I discrete sine transform convention).
pub fn sine_synthesis(x: &SpectralField, grid_size: usize) -> Result<Vec<f64>> {
    let n = x.n();
    if grid_size < n {
        return Err(invalid(format!(
            "grid_size {grid_size} < mode count {n} would alias"
        )));
    }
    let l = x.length_l();
    let norm = (2.0 / l).sqrt();
    let step = std::f64::consts::PI / (grid_size + 1) as f64;
    let mut samples = vec![0.0; grid_size];
    for (j, s) in samples.iter_mut().enumerate() {
        let theta = (j + 1) as f64 * step;
        let mut acc = 0.0;
        for (i, c) in x.coeffs().iter().enumerate() {
            acc += c * ((i + 1) as f64 * theta).sin();
        }
        *s = norm * acc;
    }
    Ok(samples)
}

/// Inverse of [`sine_synthesis`] for the leading `n_modes` coefficients.
///
/// Exact (to roundoff) whenever the samples come from a field with at most
/// `samples.len()` modes; otherwise it is the DST-I quadrature projection.
pub fn sine_analysis(samples: &[f64], length_l: f64, n_modes: usize) -> Result<SpectralField> {
    let grid_size = samples.len();
    if n_modes == 0 {
        return Err(invalid("mode count must be >= 1"));
    }
    if grid_size < n_modes {
        return Err(invalid(format!(
            "grid_size {grid_size} < mode count {n_modes} would alias"
        )));
    }
    if !(length_l > 0.0) {
        return Err(invalid("domain length must be positive"));
    }
    let step = std::f64::consts::PI / (grid_size + 1) as f64;
    let scale = (2.0 * length_l).sqrt() / (grid_size + 1) as f64;
    let mut coeffs = vec![0.0; n_modes];
    for (i, c) in coeffs.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, s) in samples.iter().enumerate() {
            acc += s * ((i + 1) as f64 * (j + 1) as f64 * step).sin();
        }
        *c = scale * acc;
    }
    SpectralField::new(coeffs, length_l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_field(rng: &mut StdRng, n: usize, l: f64) -> SpectralField {
        let coeffs = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        SpectralField::new(coeffs, l).unwrap()
    }

    #[test]
    fn eigenvalue_examples() {
        assert_relative_eq!(
            eigenvalue(1, std::f64::consts::PI).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            eigenvalue(3, std::f64::consts::PI).unwrap(),
            9.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            eigenvalue(1, 1.0).unwrap(),
            9.869604401089358,
            max_relative = 1e-12
        );
        assert!(eigenvalue(0, 1.0).is_err());
        assert!(eigenvalue(1, 0.0).is_err());
        assert!(eigenvalue(1, -2.0).is_err());
    }

    #[test]
    fn eigenvalues_strictly_increasing() {
        let params = SpectralOperatorParams::new(2.7, 32).unwrap();
        let alphas = params.alphas();
        assert!(alphas[0] > 0.0);
        for w in alphas.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn semigroup_identity_at_zero() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = random_field(&mut rng, 12, 1.5);
        let y = semigroup_apply(&x, 0.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn semigroup_single_mode() {
        let x = SpectralField::basis(1, 4, std::f64::consts::PI);
        let y = semigroup_apply(&x, 1.0).unwrap();
        assert_relative_eq!(y.coeff(1), 0.36787944117144233, max_relative = 1e-15);
        for k in 2..=4 {
            assert_eq!(y.coeff(k), 0.0);
        }
    }

    #[test]
    fn semigroup_contracts_and_composes() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_field(&mut rng, 9, 2.0);
            let t = rng.gen_range(0.0..3.0);
            let s = rng.gen_range(0.0..3.0);
            let alpha1 = x.operator_params().alpha1();
            let xt = semigroup_apply(&x, t).unwrap();
            assert!(xt.l2_norm() <= (-alpha1 * t).exp() * x.l2_norm() + 1e-14);
            let via_two = semigroup_apply(&semigroup_apply(&x, s).unwrap(), t).unwrap();
            let direct = semigroup_apply(&x, s + t).unwrap();
            for k in 1..=x.n() {
                assert_relative_eq!(via_two.coeff(k), direct.coeff(k), epsilon = 1e-12);
            }
        }
        assert!(semigroup_apply(&random_field(&mut rng, 3, 1.0), -0.1).is_err());
    }

    #[test]
    fn exp_euler_weight_examples() {
        assert_relative_eq!(
            exp_euler_weight(1.0, 0.1, 1.0).unwrap(),
            0.09516258196404043,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            exp_euler_weight(1.0, 0.01, 0.01).unwrap(),
            0.01 * (1.0 - (-1.0f64).exp()),
            max_relative = 1e-12
        );
        // weight / h -> 1 as h -> 0+ (ratio differs from 1 by ~ alpha h / 2)
        for &h in &[1e-4, 1e-8, 1e-12] {
            let w = exp_euler_weight(3.0, h, 1.0).unwrap();
            assert!((w / h - 1.0).abs() <= 1.6 * h + 1e-15);
        }
        assert!(exp_euler_weight(1.0, 0.0, 1.0).is_err());
        assert!(exp_euler_weight(1.0, 0.1, 0.0).is_err());
        assert!(exp_euler_weight(1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn exp_euler_weight_bounded() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let alpha = rng.gen_range(0.1..200.0);
            let h = rng.gen_range(1e-6..1.0f64);
            let scale = rng.gen_range(1e-4..1.0f64);
            let w = exp_euler_weight(alpha, h, scale).unwrap();
            assert!(w > 0.0);
            // strict bound mathematically; fp rounding reaches equality when
            // alpha h / scale is tiny (w -> h) or huge (w -> scale/alpha)
            assert!(w <= h.min(scale / alpha));
            let x = alpha * h / scale;
            if x > 1e-8 && x < 36.0 {
                assert!(w < h.min(scale / alpha));
            }
        }
    }

    #[test]
    fn fractional_norm_examples() {
        let l = std::f64::consts::PI;
        let e1 = SpectralField::basis(1, 4, l);
        assert_relative_eq!(
            fractional_norm(&e1, 1.0).unwrap(),
            1.0,
            max_relative = 1e-14
        );

        let mut rng = StdRng::seed_from_u64(3);
        let x = random_field(&mut rng, 8, 2.2);
        assert_relative_eq!(
            fractional_norm(&x, 0.0).unwrap(),
            x.l2_norm(),
            max_relative = 1e-14
        );

        let two_e2 = SpectralField::basis(2, 4, l).scaled(2.0);
        assert_relative_eq!(
            fractional_norm(&two_e2, 0.5).unwrap(),
            4.0,
            max_relative = 1e-13
        );

        assert!(fractional_norm(&x, -0.1).is_err());
        assert!(fractional_norm(&x, 1.2).is_err());
    }

    #[test]
    fn sine_transform_roundtrip() {
        let mut rng = StdRng::seed_from_u64(42);
        let x = random_field(&mut rng, 16, 1.7);
        let samples = sine_synthesis(&x, 32).unwrap();
        let back = sine_analysis(&samples, x.length_l(), 16).unwrap();
        let max_err = x
            .coeffs()
            .iter()
            .zip(back.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-10, "roundtrip error {max_err}");
    }

    #[test]
    fn sine_synthesis_mode_one() {
        let l = std::f64::consts::PI;
        let e1 = SpectralField::basis(1, 1, l);
        let samples = sine_synthesis(&e1, 3).unwrap();
        let nodes = collocation_nodes(l, 3);
        assert_relative_eq!(nodes[0], std::f64::consts::PI / 4.0, max_relative = 1e-15);
        assert_relative_eq!(nodes[1], std::f64::consts::PI / 2.0, max_relative = 1e-15);
        let norm = (2.0 / l).sqrt();
        for (s, xi) in samples.iter().zip(&nodes) {
            assert_relative_eq!(
                *s,
                norm * (xi / l * std::f64::consts::PI).sin(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn sine_transform_edge_cases() {
        let z = SpectralField::zero(5, 2.0);
        let samples = sine_synthesis(&z, 10).unwrap();
        assert!(samples.iter().all(|s| *s == 0.0));
        assert!(sine_synthesis(&z, 4).is_err());
        assert!(sine_analysis(&samples, 2.0, 11).is_err());
    }

    #[test]
    fn parseval_matches_euclidean() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let x = random_field(&mut rng, 10, 3.0);
            let euclid = x.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((x.l2_norm() - euclid).abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothing_bound_on_grid() {
        // alpha_k^gamma exp(-alpha_k t / 2) <= (2 gamma / e)^gamma t^{-gamma}
        let params = SpectralOperatorParams::new(std::f64::consts::PI, 64).unwrap();
        for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for &t in &[1e-3f64, 1e-2, 0.1, 0.5, 1.0, 4.0] {
                let bound = if gamma == 0.0 {
                    1.0
                } else {
                    (2.0 * gamma / std::f64::consts::E).powf(gamma) * t.powf(-gamma)
                };
                for k in 1..=64 {
                    let a = params.alpha(k);
                    let lhs = a.powf(gamma) * (-a * t / 2.0).exp();
                    assert!(
                        lhs <= bound * (1.0 + 1e-12),
                        "smoothing bound violated at k={k} t={t} gamma={gamma}: {lhs} > {bound}"
                    );
                }
            }
        }
    }
}
