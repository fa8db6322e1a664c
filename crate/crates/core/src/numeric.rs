//! Scalar numeric primitives shared by every loss.

use crate::error::{Error, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Logistic function, stable for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy of a single probability against a (possibly soft) target.
#[inline]
pub fn bce_scalar(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of [`bce_scalar`] with respect to `p` (zero where the clamp is active).
#[inline]
pub fn bce_scalar_grad(p: f64, y: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}

/// Multi-label binary cross entropy summed over classes.
pub fn binary_cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "binary_cross_entropy: {} predictions vs {} labels",
            p.len(),
            y.len()
        )));
    }
    Ok(p.iter().zip(y).map(|(&p, &y)| bce_scalar(p, y)).sum())
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
