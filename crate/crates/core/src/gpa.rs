//! Global prototype alignment: attention-guided class features, confidence-weighted
//! EMA prototypes, and intra-class / inter-class metric losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Class feature of one image, detached copy used for the prototype update.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeature {
    pub class_id: usize,
    pub feature: Vec<f64>,
    /// Image-level prediction `p_c` of the same image.
    pub confidence: f64,
}

/// `ℱ_c = Σ_i ℛ_c[i]·ℳ[:, i]`.
pub fn aggregate_features(feature: &Tensor3, attention: &[f64]) -> Result<Vec<f64>> {
    if attention.len() != feature.plane_len() {
        return Err(Error::Shape(format!(
            "aggregate_features: attention has {} pixels, feature map {}",
            attention.len(),
            feature.plane_len()
        )));
    }
    Ok((0..feature.channels)
        .map(|d| feature.plane(d).iter().zip(attention).map(|(m, r)| m * r).sum())
        .collect())
}

/// Gradient of [`aggregate_features`]: returns d/dℛ and accumulates d/dℳ.
pub fn aggregate_backward(feature: &Tensor3, attention: &[f64], dfeat: &[f64], dmap: &mut Tensor3) -> Vec<f64> {
    let plane = feature.plane_len();
    let mut dr = vec![0.0; plane];
    for (d, &g) in dfeat.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let m = feature.plane(d);
        for i in 0..plane {
            dr[i] += g * m[i];
        }
        let dm = dmap.plane_mut(d);
        for i in 0..plane {
            dm[i] += g * attention[i];
        }
    }
    dr
}

/// Per-class prototypes maintained by confidence-weighted EMA. Never trained by gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Vec<Vec<f64>>,
    /// Number of updates each class has received; the first uses β = 0.
    pub updates: Vec<u64>,
    /// Batch updates performed.
    pub step: u64,
    pub beta: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PrototypeBank {
    pub fn new(num_classes: usize, dim: usize, beta: f64) -> Self {
        PrototypeBank {
            prototypes: vec![vec![0.0; dim]; num_classes],
            updates: vec![0; num_classes],
            step: 0,
            beta,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_initialized(&self, class_id: usize) -> bool {
        self.updates[class_id] > 0
    }

    /// EMA coefficient for the next update of `class_id`.
    pub fn beta_for(&self, class_id: usize) -> f64 {
        if self.updates[class_id] == 0 {
            0.0
        } else {
            self.beta
        }
    }

    /// `𝒫 ← β𝒫 + (1−β)·Σ p_k ℱ_k / Σ p_k`, per class over the samples that contain it.
    pub fn update(&mut self, batch: &[CategoryFeature]) {
        let n = self.num_classes();
        let dim = self.prototypes.first().map_or(0, Vec::len);
        let mut num = vec![vec![0.0; dim]; n];
        let mut den = vec![0.0; n];
        for f in batch {
            den[f.class_id] += f.confidence;
            for (acc, v) in num[f.class_id].iter_mut().zip(&f.feature) {
                *acc += f.confidence * v;
            }
        }
        for c in 0..n {
            if den[c] <= 0.0 {
                continue;
            }
            let beta = self.beta_for(c);
            for (p, s) in self.prototypes[c].iter_mut().zip(&num[c]) {
                *p = beta * *p + (1.0 - beta) * (s / den[c]);
            }
            self.updates[c] += 1;
        }
        self.step += 1;
    }
}

/// Features of the classes present in one image, `(class_id, ℱ_c)`.
pub type ClassFeatures<'a> = [(usize, &'a [f64])];

/// `(1/N) Σ_c ‖ℱ_c − 𝒫_c‖²` over present classes with an initialized prototype.
/// Returns the loss and d/dℱ per entry of `features`.
pub fn intra_loss(features: &ClassFeatures, bank: &PrototypeBank) -> (f64, Vec<Vec<f64>>) {
    let n = bank.num_classes() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for &(c, f) in features {
        let mut g = vec![0.0; f.len()];
        if bank.is_initialized(c) {
            let p = &bank.prototypes[c];
            loss += sq_dist(f, p) / n;
            for ((g, fv), pv) in g.iter_mut().zip(f).zip(p) {
                *g = 2.0 * (fv - pv) / n;
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

/// `(1/(N(N−1))) Σ_c Σ_{j≠c} max(0, δ − ‖ℱ_j − 𝒫_c‖²)`, with `j` over present classes
/// and `c` over initialized prototypes. Returns the loss and d/dℱ per entry.
pub fn inter_loss(features: &ClassFeatures, bank: &PrototypeBank, delta: f64) -> (f64, Vec<Vec<f64>>) {
    let n = bank.num_classes();
    let mut grads: Vec<Vec<f64>> = features.iter().map(|(_, f)| vec![0.0; f.len()]).collect();
    if n < 2 {
        return (0.0, grads);
    }
    let norm = (n * (n - 1)) as f64;
    let mut loss = 0.0;
    for c in (0..n).filter(|&c| bank.is_initialized(c)) {
        let p = &bank.prototypes[c];
        for (k, &(j, f)) in features.iter().enumerate() {
            if j == c {
                continue;
            }
            let hinge = delta - sq_dist(f, p);
            if hinge > 0.0 {
                loss += hinge / norm;
                for ((g, fv), pv) in grads[k].iter_mut().zip(f).zip(p) {
                    *g -= 2.0 * (fv - pv) / norm;
                }
            }
        }
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_with(protos: Vec<Vec<f64>>) -> PrototypeBank {
        let n = protos.len();
        PrototypeBank {
            prototypes: protos,
            updates: vec![1; n],
            step: 1,
            beta: 0.7,
        }
    }

    #[test]
    fn aggregate_examples() {
        let m = Tensor3::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(aggregate_features(&m, &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
        let constant = Tensor3::from_vec(2, 2, 2, vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let f = aggregate_features(&constant, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((f[0] - 3.0).abs() < 1e-15 && (f[1] + 1.0).abs() < 1e-15);
        let f = aggregate_features(&m, &[0.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.0, 1.0]);
        assert!(aggregate_features(&m, &[1.0]).is_err());
    }

    #[test]
    fn first_update_is_weighted_mean() {
        let mut bank = PrototypeBank::new(1, 2, 0.7);
        bank.prototypes[0] = vec![100.0, 100.0];
        let feats = vec![
            CategoryFeature { class_id: 0, feature: vec![1.0, 0.0], confidence: 0.2 },
            CategoryFeature { class_id: 0, feature: vec![0.0, 1.0], confidence: 0.8 },
        ];
        bank.update(&feats);
        assert_eq!(bank.prototypes[0], vec![0.2, 0.8]);
        assert_eq!(bank.step, 1);
    }

    #[test]
    fn later_update_uses_beta() {
        let mut bank = bank_with(vec![vec![0.0, 0.0]]);
        let feats = vec![
            CategoryFeature { class_id: 0, feature: vec![1.0, 0.0], confidence: 0.2 },
            CategoryFeature { class_id: 0, feature: vec![0.0, 1.0], confidence: 0.8 },
        ];
        bank.update(&feats);
        assert!((bank.prototypes[0][0] - 0.06).abs() < 1e-15);
        assert!((bank.prototypes[0][1] - 0.24).abs() < 1e-15);
    }

    #[test]
    fn equal_confidences_give_plain_mean_and_absent_classes_keep() {
        let mut bank = bank_with(vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
        bank.updates = vec![0, 1];
        let feats = vec![
            CategoryFeature { class_id: 0, feature: vec![1.0, 3.0], confidence: 0.4 },
            CategoryFeature { class_id: 0, feature: vec![3.0, 1.0], confidence: 0.4 },
        ];
        bank.update(&feats);
        assert_eq!(bank.prototypes[0], vec![2.0, 2.0]);
        assert_eq!(bank.prototypes[1], vec![5.0, 5.0]);
        // zero confidence skips the class
        let before = bank.clone();
        bank.update(&[CategoryFeature { class_id: 1, feature: vec![0.0, 0.0], confidence: 0.0 }]);
        assert_eq!(bank.prototypes, before.prototypes);
    }

    #[test]
    fn intra_examples() {
        let mut protos = vec![vec![0.0, 0.0]; 9];
        protos[0] = vec![1.0, 1.0];
        let bank = bank_with(protos);
        let f = [1.0, 1.0];
        assert_eq!(intra_loss(&[(0, &f)], &bank).0, 0.0);
        let f = [1.0, 3.0]; // ‖diff‖² = 4
        let (l, _) = intra_loss(&[(0, &f)], &bank);
        assert!((l - 4.0 / 9.0).abs() < 1e-15);
        let f2 = [1.0, 5.0];
        assert!((intra_loss(&[(0, &f2)], &bank).0 - 4.0 * l).abs() < 1e-15);
        assert_eq!(intra_loss(&[], &bank).0, 0.0);
    }

    #[test]
    fn inter_examples() {
        let bank = bank_with(vec![vec![0.0, 0.0]; 9]);
        // all distances ≥ δ
        let far = [2.0, 0.0];
        assert_eq!(inter_loss(&[(1, &far)], &bank, 1.0).0, 0.0);
        // only prototype 0 initialized: one pair at distance² 0.36
        let mut one = bank_with(vec![vec![0.0, 0.0]; 9]);
        one.updates = vec![0; 9];
        one.updates[0] = 1;
        let f = [0.6, 0.0];
        let (l, _) = inter_loss(&[(1, &f)], &one, 1.0);
        assert!((l - 0.64 / 72.0).abs() < 1e-15);
        assert!((l - 0.00889).abs() < 1e-5);
        // saturated hinge: ℱ_j = 𝒫_c for every pair
        let zero = [0.0, 0.0];
        let (l, _) = inter_loss(&[(1, &zero)], &bank, 1.0);
        assert!((l - 8.0 / 72.0).abs() < 1e-15);
        assert!(l <= 1.0);
        // a single class has no pairs
        let single = bank_with(vec![vec![0.0, 0.0]]);
        assert_eq!(inter_loss(&[(0, &zero)], &single, 1.0).0, 0.0);
    }
}
