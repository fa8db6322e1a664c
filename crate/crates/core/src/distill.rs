//! Mean-teacher distillation with the soft focal loss.

use serde::{Deserialize, Serialize};

use crate::detector::{Network, PyramidOutputs};
use crate::error::{Error, Result};
use crate::numeric::{bce_scalar, bce_scalar_grad, clamp_prob, sigmoid, PROB_EPS};
use crate::tensor::Tensor3;
use crate::types::Image;

/// EMA copy of the student parameters. Receives no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: Vec<f64>,
    pub decay: f64,
}

impl TeacherState {
    /// Teacher starts as an exact copy of the student.
    pub fn from_student(student: &[f64], decay: f64) -> Self {
        TeacherState {
            params: student.to_vec(),
            decay,
        }
    }

    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        ema_update(&mut self.params, student, self.decay)
    }

    /// Forward pass with teacher parameters; outputs are plain values with no backward path.
    pub fn predict(&self, net: &Network, image: &Image) -> Result<PyramidOutputs> {
        net.predict(&self.params, image)
    }
}

/// `θ̃ ← λθ̃ + (1−λ)θ`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], lambda: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "ema_update: teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = lambda * *t + (1.0 - lambda) * s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftFocal {
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl SoftFocal {
    pub fn new(alpha: f64, epsilon: f64, gamma: f64) -> Self {
        SoftFocal { alpha, epsilon, gamma }
    }

    /// `(q̃α + ε)·|q̃ − q|^γ·BCE(q, q̃)` for student `q` and teacher `q̃`.
    pub fn elem(&self, q: f64, teacher: f64) -> f64 {
        let q = clamp_prob(q);
        let t = teacher.clamp(0.0, 1.0);
        let diff = (t - q).abs();
        if diff == 0.0 {
            return 0.0;
        }
        (t * self.alpha + self.epsilon) * diff.powf(self.gamma) * bce_scalar(q, t)
    }

    /// d(elem)/dq; the teacher side is treated as a constant.
    pub fn elem_grad(&self, q: f64, teacher: f64) -> f64 {
        if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
            return 0.0;
        }
        let t = teacher.clamp(0.0, 1.0);
        let diff = (t - q).abs();
        if diff == 0.0 {
            return 0.0;
        }
        let w = t * self.alpha + self.epsilon;
        let g = self.gamma;
        let focal = diff.powf(g);
        let dfocal = if g == 0.0 {
            0.0
        } else {
            g * diff.powf(g - 1.0) * (q - t).signum()
        };
        w * (dfocal * bce_scalar(q, t) + focal * bce_scalar_grad(q, t))
    }

    #[inline]
    pub fn elem_logit(&self, z: f64, teacher: f64) -> (f64, f64) {
        let q = sigmoid(z);
        (self.elem(q, teacher), self.elem_grad(q, teacher) * q * (1.0 - q))
    }
}

/// Soft focal loss between flat student and teacher probability lists (summed).
pub fn soft_focal_loss(q: &[f64], teacher: &[f64], alpha: f64, epsilon: f64, gamma: f64) -> f64 {
    let sf = SoftFocal::new(alpha, epsilon, gamma);
    q.iter().zip(teacher).map(|(&q, &t)| sf.elem(q, t)).sum()
}

/// Dense soft focal loss over every class, anchor and level, normalized by the
/// anchor count. Returns the loss and its gradient with respect to the student logits.
pub fn dense_soft_focal(student: &PyramidOutputs, teacher: &PyramidOutputs, loss: SoftFocal) -> (f64, Vec<Tensor3>) {
    let anchors: usize = student
        .cls_logits
        .iter()
        .map(|t| t.plane_len() * student.anchors)
        .sum();
    let norm = anchors.max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.levels());
    for (s, t) in student.cls_logits.iter().zip(&teacher.cls_logits) {
        let mut g = s.zeros_like();
        for ((gv, &z), &zt) in g.data.iter_mut().zip(&s.data).zip(&t.data) {
            let (l, d) = loss.elem_logit(z, sigmoid(zt));
            total += l;
            *gv = d / norm;
        }
        grads.push(g);
    }
    (total / norm, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::FocalLoss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_examples() {
        let mut t = vec![2.0];
        ema_update(&mut t, &[4.0], 0.99).unwrap();
        assert!((t[0] - 2.02).abs() < 1e-12);
        let mut t = vec![1.0, -3.0];
        ema_update(&mut t, &[5.0, 7.0], 0.0).unwrap();
        assert_eq!(t, vec![5.0, 7.0]);
        let mut t = vec![1.0, -3.0];
        ema_update(&mut t, &[5.0, 7.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, -3.0]);
        assert!(ema_update(&mut t, &[1.0], 0.5).is_err());
    }

    #[test]
    fn soft_focal_examples() {
        let sf = SoftFocal::new(0.9, 0.05, 2.0);
        assert_eq!(sf.elem(0.3, 0.3), 0.0);
        let v = sf.elem(0.5, 1.0 - PROB_EPS);
        assert!((v - 0.95 * 0.25 * std::f64::consts::LN_2).abs() < 1e-6);
        assert!((v - 0.1646).abs() < 1e-4);
        let v = sf.elem(0.5, PROB_EPS);
        assert!((v - 0.05 * 0.25 * std::f64::consts::LN_2).abs() < 1e-6);
        assert!((v - 0.00866).abs() < 1e-5);
    }

    #[test]
    fn soft_focal_nonnegative_zero_iff_equal() {
        let sf = SoftFocal::new(0.9, 0.05, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let q: f64 = rng.random_range(0.001..0.999);
            let t: f64 = rng.random_range(0.001..0.999);
            let v = sf.elem(q, t);
            assert!(v >= 0.0);
            assert_eq!(v == 0.0, q == t);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sf = SoftFocal::new(0.9, 0.05, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let q: f64 = rng.random_range(0.05..0.95);
            let t: f64 = rng.random_range(0.0..1.0);
            if (q - t).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let num = (sf.elem(q + h, t) - sf.elem(q - h, t)) / (2.0 * h);
            let ana = sf.elem_grad(q, t);
            assert!((num - ana).abs() / num.abs().max(1e-10) < 1e-4, "q={q} t={t}");
        }
    }

    #[test]
    fn hard_teacher_reduces_to_scaled_focal() {
        let (alpha, eps, gamma) = (0.9, 0.05, 2.0);
        let sf = SoftFocal::new(alpha, eps, gamma);
        let fl = FocalLoss::new(alpha, gamma);
        for i in 1..100 {
            let q = i as f64 / 100.0;
            let scaled = sf.elem(q, 1.0) / ((alpha + eps) / alpha);
            assert!((scaled - fl.elem(q, true)).abs() < 1e-6, "q={q}");
        }
    }
}
