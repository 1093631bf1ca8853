//! Reproducible Gaussian increments for the two independent Q-Wiener
//! processes.
//!
//! Every stream is keyed by `(master_seed, sample_index, process_tag)` and is
//! a pure function of that triple, so a Monte-Carlo run is embarrassingly
//! parallel and bit-reproducible regardless of worker count or scheduling.
//! The linear-plus-noise part of every integrator step is sampled with its
//! exact per-mode variance (the stochastic convolution against the semigroup)
//! rather than with Euler-Maruyama `sqrt(h)` increments; the fast equation is
//! stiff at small `eps` and the exact draw keeps it unconditionally stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::models::CovarianceSpec;
use crate::spectral::SpectralField;

/// Which of the driving processes a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcessTag {
    /// Noise on the slow equation (`W^1`).
    W1,
    /// Noise on the fast equation (`W^2`).
    W2,
    /// Auxiliary randomness (nested estimators, synthetic tests).
    Aux,
}

impl ProcessTag {
    fn byte(self) -> u8 {
        match self {
            ProcessTag::W1 => 1,
            ProcessTag::W2 => 2,
            ProcessTag::Aux => 3,
        }
    }
}

/// A deterministic Gaussian stream identified by its seeding triple.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    draws: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, sample_index: u64, tag: ProcessTag) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"avgspde-stream-v1");
        hasher.update(master_seed.to_le_bytes());
        hasher.update(sample_index.to_le_bytes());
        hasher.update([tag.byte()]);
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Self {
            rng: ChaCha8Rng::from_seed(seed),
            draws: 0,
        }
    }

    /// One standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(StandardNormal)
    }

    /// Number of normal draws consumed so far.
    pub fn draws_consumed(&self) -> u64 {
        self.draws
    }

    /// Fill `out` with independent standard normals (always `out.len()` draws).
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}

/// Derives related stream families deterministically from one master seed.
///
/// `stream(i, tag)` is the worker-facing entry point; `child(label)` derives
/// an independent family for nested estimators so their draws can never
/// collide with the parent's.
#[derive(Debug, Clone, Copy)]
pub struct StreamFamily {
    master_seed: u64,
}

impl StreamFamily {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream(&self, sample_index: u64, tag: ProcessTag) -> NoiseStream {
        NoiseStream::new(self.master_seed, sample_index, tag)
    }

    pub fn child(&self, label: &str) -> StreamFamily {
        let mut hasher = Sha256::new();
        hasher.update(b"avgspde-family-v1");
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        StreamFamily {
            master_seed: u64::from_le_bytes(bytes),
        }
    }
}

/// Increment of the Q-Wiener process over a step: coefficient `k` is
/// `Normal(0, lambda_k h)`.  Consumes exactly `n` draws.
pub fn wiener_increment(
    stream: &mut NoiseStream,
    q: &CovarianceSpec,
    h: f64,
    n: usize,
    length_l: f64,
) -> Result<SpectralField> {
    if !(h > 0.0) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let mut coeffs = vec![0.0; n];
    for (i, c) in coeffs.iter_mut().enumerate() {
        let z = stream.normal();
        *c = (q.lambda(i + 1) * h).sqrt() * z;
    }
    SpectralField::new(coeffs, length_l)
}

/// Per-mode variance of the one-step stochastic convolution
/// `sigma int_0^h exp(-alpha (h-s)/scale) dW_s`:
/// `sigma^2 lambda scale (1 - exp(-2 alpha h / scale)) / (2 alpha)`.
///
/// With `fast = true` the leading `scale` factor is dropped; that is the
/// variance of the fast equation's noise (drift `A/eps`, strength
/// `sigma_2/sqrt(eps)`), where the `1/eps` from the noise intensity cancels
/// the `eps` from the time change.
pub fn stoch_conv_variance(
    alpha: f64,
    sigma: f64,
    lambda: f64,
    h: f64,
    scale: f64,
    fast: bool,
) -> f64 {
    let base = -(-2.0 * alpha * h / scale).exp_m1() / (2.0 * alpha);
    let v = sigma * sigma * lambda * base;
    if fast {
        v
    } else {
        v * scale
    }
}

/// One-step stochastic-convolution increment with exact per-mode variance.
/// Consumes exactly `n` draws.
#[allow(clippy::too_many_arguments)]
pub fn stoch_conv_increment(
    stream: &mut NoiseStream,
    q: &CovarianceSpec,
    sigma: f64,
    h: f64,
    scale: f64,
    fast: bool,
    n: usize,
    length_l: f64,
) -> Result<SpectralField> {
    if !(h > 0.0) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    if !(scale > 0.0) {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    let mut coeffs = vec![0.0; n];
    for (i, c) in coeffs.iter_mut().enumerate() {
        let alpha = eigen(i + 1, length_l);
        let v = stoch_conv_variance(alpha, sigma, q.lambda(i + 1), h, scale, fast);
        let z = stream.normal();
        *c = v.sqrt() * z;
    }
    SpectralField::new(coeffs, length_l)
}

fn eigen(k: usize, length_l: f64) -> f64 {
    let w = k as f64 * std::f64::consts::PI / length_l;
    w * w
}
