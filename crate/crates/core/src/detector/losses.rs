//! Supervised detection losses: α-balanced focal loss and smooth-L1 regression.

use super::anchors::AnchorSet;
use super::network::PyramidOutputs;
use super::targets::{AnchorLabel, AnchorTargets};
use crate::numeric::{clamp_prob, sigmoid, PROB_EPS};
use crate::tensor::Tensor3;

/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub alpha: f64,
    pub gamma: f64,
}

#[inline]
fn pow_or_zero(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        0.0
    } else {
        base.powf(exp)
    }
}

impl FocalLoss {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        FocalLoss { alpha, gamma }
    }

    /// Per-element loss for probability `q`.
    pub fn elem(&self, q: f64, positive: bool) -> f64 {
        let q = clamp_prob(q);
        if positive {
            -self.alpha * (1.0 - q).powf(self.gamma) * q.ln()
        } else {
            -(1.0 - self.alpha) * q.powf(self.gamma) * (1.0 - q).ln()
        }
    }

    /// d(elem)/dq, zero inside the clamp region.
    pub fn elem_grad(&self, q: f64, positive: bool) -> f64 {
        if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
            return 0.0;
        }
        let g = self.gamma;
        if positive {
            self.alpha * (g * pow_or_zero(1.0 - q, g - 1.0) * q.ln() - (1.0 - q).powf(g) / q)
        } else {
            -(1.0 - self.alpha) * (g * pow_or_zero(q, g - 1.0) * (1.0 - q).ln() - q.powf(g) / (1.0 - q))
        }
    }

    /// Loss and gradient with respect to the logit.
    #[inline]
    pub fn elem_logit(&self, z: f64, positive: bool) -> (f64, f64) {
        let q = sigmoid(z);
        (self.elem(q, positive), self.elem_grad(q, positive) * q * (1.0 - q))
    }
}

/// Focal loss over a flat list of anchor probabilities with hard targets,
/// normalized by the positive count (at least 1).
pub fn focal_loss(q: &[f64], targets: &[bool], alpha: f64, gamma: f64) -> f64 {
    let f = FocalLoss::new(alpha, gamma);
    let npos = targets.iter().filter(|&&t| t).count().max(1);
    q.iter().zip(targets).map(|(&q, &t)| f.elem(q, t)).sum::<f64>() / npos as f64
}

#[inline]
pub fn smooth_l1_elem(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Smooth-L1 summed over the four offsets, averaged over anchors.
pub fn smooth_l1(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..4).map(move |k| smooth_l1_elem(p[k] - t[k])))
        .sum();
    s / pred.len() as f64
}

/// Dense focal loss of one image and its gradient with respect to the class logits.
pub fn dense_focal(
    out: &PyramidOutputs,
    targets: &AnchorTargets,
    anchors: &AnchorSet,
    loss: FocalLoss,
) -> (f64, Vec<Tensor3>) {
    let n = out.num_classes;
    let mut grads: Vec<Tensor3> = out.cls_logits.iter().map(Tensor3::zeros_like).collect();
    let mut total = 0.0;
    let norm = targets.num_positive.max(1) as f64;
    for (m, logits) in out.cls_logits.iter().enumerate() {
        let level = &anchors.levels[m];
        for y in 0..level.height {
            for x in 0..level.width {
                for a in 0..level.sizes.len() {
                    let label = targets.labels[anchors.index(m, y, x, a)];
                    if label == AnchorLabel::Ignore {
                        continue;
                    }
                    for c in 0..n {
                        let positive = label == AnchorLabel::Positive(c);
                        let ch = out.cls_channel(a, c);
                        let (l, g) = loss.elem_logit(logits.get(ch, y, x), positive);
                        total += l;
                        grads[m].set(ch, y, x, g / norm);
                    }
                }
            }
        }
    }
    (total / norm, grads)
}

/// Dense regression loss of one image over its positive anchors.
pub fn dense_regression(out: &PyramidOutputs, targets: &AnchorTargets, anchors: &AnchorSet) -> (f64, Vec<Tensor3>) {
    let mut grads: Vec<Tensor3> = out.reg.iter().map(Tensor3::zeros_like).collect();
    if targets.num_positive == 0 {
        return (0.0, grads);
    }
    let norm = targets.num_positive as f64;
    let mut total = 0.0;
    for (i, label) in targets.labels.iter().enumerate() {
        if !matches!(label, AnchorLabel::Positive(_)) {
            continue;
        }
        let (m, y, x, a) = anchors.locate(i);
        for k in 0..4 {
            let ch = a * 4 + k;
            let d = out.reg[m].get(ch, y, x) - targets.reg[i][k];
            total += smooth_l1_elem(d);
            grads[m].set(ch, y, x, smooth_l1_grad(d) / norm);
        }
    }
    (total / norm, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_examples() {
        let f = FocalLoss::new(0.9, 2.0);
        assert!(f.elem(1.0 - PROB_EPS, true) < 1e-12);
        let v = f.elem(0.5, true);
        assert!((v - 0.9 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.1560).abs() < 1e-4);
        let plain = FocalLoss::new(1.0, 0.0);
        for q in [0.1, 0.3, 0.77] {
            assert!((plain.elem(q, true) + q.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_list_normalizes_by_positives() {
        let q = [0.5, 0.5, 0.2];
        let t = [true, true, false];
        let f = FocalLoss::new(0.9, 2.0);
        let expected = (2.0 * f.elem(0.5, true) + f.elem(0.2, false)) / 2.0;
        assert!((focal_loss(&q, &t, 0.9, 2.0) - expected).abs() < 1e-15);
        // no positives: normalized by 1
        assert!((focal_loss(&[0.2], &[false], 0.9, 2.0) - f.elem(0.2, false)).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[[0.3; 4]], &[[0.3; 4]]), 0.0);
        assert!((smooth_l1_elem(1.0) - (1.0 - 1.0 / 18.0)).abs() < 1e-15);
        assert!((smooth_l1_elem(1.0) - 0.9444).abs() < 1e-4);
        assert!((smooth_l1_elem(0.05) - 0.01125).abs() < 1e-15);
        assert!((smooth_l1(&[[1.0; 4], [1.0; 4]], &[[0.0; 4]; 2]) - 4.0 * (1.0 - 1.0 / 18.0)).abs() < 1e-12);
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q: f64 = rng.random_range(0.05..0.95);
            let alpha: f64 = rng.random_range(0.1..0.95);
            let gamma: f64 = rng.random_range(0.0..3.0);
            let f = FocalLoss::new(alpha, gamma);
            for pos in [true, false] {
                let num = central(|q| f.elem(q, pos), q, 1e-6);
                let ana = f.elem_grad(q, pos);
                assert!((num - ana).abs() / num.abs().max(1e-8) < 1e-4);
                let z = (q / (1.0 - q)).ln();
                let num = central(|z| f.elem(sigmoid(z), pos), z, 1e-6);
                let (_, ana) = f.elem_logit(z, pos);
                assert!((num - ana).abs() / num.abs().max(1e-8) < 1e-4);
            }
            let x: f64 = rng.random_range(-2.0..2.0);
            if (x.abs() - SMOOTH_L1_BETA).abs() > 1e-4 {
                let num = central(smooth_l1_elem, x, 1e-7);
                assert!((num - smooth_l1_grad(x)).abs() / num.abs().max(1e-8) < 1e-4);
            }
        }
    }
}
