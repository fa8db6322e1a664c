//! Dual attention alignment.
//!
//! The dense classification head yields a per-class local attention: the max
//! over anchor slots, taken at the pyramid level whose peak is highest, resized
//! to the global attention grid and normalized to sum to one. The global
//! attention map 𝒳 (a bias-free 1×1 convolution of the backbone feature) is
//! pooled through it, so the image-level loss has a gradient path into the
//! local head.

use std::path::Path;

use crate::detector::PyramidOutputs;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvCache, ParamLayout, Resize};
use crate::numeric::{bce_scalar, binary_cross_entropy, sigmoid};
use crate::tensor::Tensor3;
use crate::types::{Pooling, Sample};

/// Bias-free 1×1 convolution producing the global attention map 𝒳.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHead {
    pub conv: Conv2d,
}

impl GlobalHead {
    pub fn new(layout: &mut ParamLayout, channels: usize, num_classes: usize) -> Self {
        GlobalHead {
            conv: Conv2d::new(layout, "global.conv", channels, num_classes, 1, 1, false),
        }
    }

    pub fn forward(&self, params: &[f64], feature: &Tensor3) -> (Tensor3, ConvCache) {
        self.conv.forward(params, feature)
    }

    pub fn backward(&self, params: &[f64], cache: &ConvCache, dx: &Tensor3, grads: &mut [f64]) -> Tensor3 {
        self.conv
            .backward(params, cache, dx, grads, true)
            .expect("input grad")
    }
}

/// Global attention 𝒳 and normalized local attention ℛ on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub global_attention: Tensor3,
    pub local_attention: Tensor3,
}

/// Max over anchor slots. Input has `N·A` channels laid out as `a·N + c`;
/// returns the `N`-channel map and, per element, the winning slot.
pub fn reduce_anchor_dimension(probs: &Tensor3, num_classes: usize) -> (Tensor3, Vec<usize>) {
    let anchors = probs.channels / num_classes;
    let mut out = Tensor3::zeros(num_classes, probs.height, probs.width);
    let mut arg = vec![0usize; out.data.len()];
    let plane = probs.plane_len();
    for c in 0..num_classes {
        for i in 0..plane {
            let mut best = probs.data[c * plane + i];
            let mut best_a = 0;
            for a in 1..anchors {
                let v = probs.data[(a * num_classes + c) * plane + i];
                if v > best {
                    best = v;
                    best_a = a;
                }
            }
            out.data[c * plane + i] = best;
            arg[c * plane + i] = best_a;
        }
    }
    (out, arg)
}

/// Index of the level whose class-`c` plane has the largest peak; ties go to the
/// finest (earliest) level.
pub fn select_pyramid_level(levels: &[Tensor3], class: usize) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (m, t) in levels.iter().enumerate() {
        let peak = t.plane(class).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if peak > best_val {
            best_val = peak;
            best = m;
        }
    }
    best
}

/// Bilinear resize of one attention plane to `target`, divided by its sum.
/// A non-positive sum falls back to uniform weights.
pub fn normalize_attention(map: &[f64], shape: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    let resize = Resize::new(shape.0, shape.1, target.0, target.1);
    normalize_resized(&resize.apply(map)).0
}

fn normalize_resized(resized: &[f64]) -> (Vec<f64>, f64) {
    let sum: f64 = resized.iter().sum();
    if !(sum > f64::MIN_POSITIVE) {
        let n = resized.len() as f64;
        return (vec![1.0 / n; resized.len()], 0.0);
    }
    (resized.iter().map(|v| v / sum).collect(), sum)
}

/// `σ(Σ_i 𝒳_c[i]·ℛ_c[i])`.
pub fn daa_pool(global: &[f64], local: &[f64]) -> Result<f64> {
    if global.len() != local.len() {
        return Err(Error::Shape(format!(
            "daa_pool: global attention has {} pixels, local {}",
            global.len(),
            local.len()
        )));
    }
    Ok(sigmoid(global.iter().zip(local).map(|(x, r)| x * r).sum()))
}

/// Mean multi-label BCE over labeled samples; unlabeled samples are an error.
pub fn weak_loss(predictions: &[Vec<f64>], samples: &[&Sample]) -> Result<f64> {
    if predictions.len() != samples.len() {
        return Err(Error::Shape("weak_loss: predictions and samples differ in length".into()));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, s) in predictions.iter().zip(samples) {
        let y = s.image_labels().ok_or_else(|| Error::Unlabeled(s.id.clone()))?;
        total += binary_cross_entropy(p, y)?;
    }
    Ok(total / samples.len() as f64)
}

struct ClassAttention {
    level: usize,
    resize: Resize,
    /// Sum of the resized map; 0 marks the uniform fallback.
    sum: f64,
    /// Winning anchor slot per element of the selected level.
    argmax: Vec<usize>,
    /// Anchor-max probabilities at the selected level.
    probs: Vec<f64>,
}

/// Forward state of the image-level branch for one image.
pub struct WeakForward {
    pub attention: AttentionPair,
    /// Image-level predictions `p_c`.
    pub predictions: Vec<f64>,
    pooling: Pooling,
    classes: Vec<ClassAttention>,
}

impl WeakForward {
    pub fn new(out: &PyramidOutputs, pooling: Pooling) -> Self {
        let n = out.num_classes;
        let x = &out.global_attention;
        let (h0, w0) = (x.height, x.width);
        let probs = out.cls_probs();
        let reduced: Vec<(Tensor3, Vec<usize>)> = probs.iter().map(|p| reduce_anchor_dimension(p, n)).collect();
        let maps: Vec<Tensor3> = reduced.iter().map(|(t, _)| t.clone()).collect();
        let mut local = Tensor3::zeros(n, h0, w0);
        let mut classes = Vec::with_capacity(n);
        let mut predictions = Vec::with_capacity(n);
        for c in 0..n {
            let level = select_pyramid_level(&maps, c);
            let map = &maps[level];
            let resize = Resize::new(map.height, map.width, h0, w0);
            let (r, sum) = match pooling {
                Pooling::Daa => normalize_resized(&resize.apply(map.plane(c))),
                Pooling::GlobalAverage => (vec![1.0 / (h0 * w0) as f64; h0 * w0], 0.0),
            };
            local.plane_mut(c).copy_from_slice(&r);
            let plane = map.plane_len();
            classes.push(ClassAttention {
                level,
                resize,
                sum,
                argmax: reduced[level].1[c * plane..(c + 1) * plane].to_vec(),
                probs: map.plane(c).to_vec(),
            });
            predictions.push(daa_pool(x.plane(c), &r).expect("matching grids"));
        }
        WeakForward {
            attention: AttentionPair {
                global_attention: x.clone(),
                local_attention: local,
            },
            predictions,
            pooling,
            classes,
        }
    }

    /// BCE against image labels: loss, d/d𝒳 and d/dℛ, each scaled by `weight`.
    pub fn bce(&self, labels: &[f64], weight: f64) -> (f64, Tensor3, Tensor3) {
        let x = &self.attention.global_attention;
        let r = &self.attention.local_attention;
        let mut dx = x.zeros_like();
        let mut dr = r.zeros_like();
        let mut loss = 0.0;
        for (c, (&p, &y)) in self.predictions.iter().zip(labels).enumerate() {
            loss += bce_scalar(p, y);
            // dBCE/ds for p = σ(s)
            let ds = weight * (p - y);
            for (g, &rv) in dx.plane_mut(c).iter_mut().zip(r.plane(c)) {
                *g = ds * rv;
            }
            if self.pooling == Pooling::Daa {
                for (g, &xv) in dr.plane_mut(c).iter_mut().zip(x.plane(c)) {
                    *g = ds * xv;
                }
            }
        }
        (loss, dx, dr)
    }

    /// Back-propagates d/dℛ through normalization, resize, level selection and
    /// the anchor max into the dense classification logits.
    pub fn local_backward(&self, dr: &Tensor3, out: &PyramidOutputs) -> Vec<Tensor3> {
        let mut dcls: Vec<Tensor3> = out.cls_logits.iter().map(Tensor3::zeros_like).collect();
        if self.pooling != Pooling::Daa {
            return dcls;
        }
        let r = &self.attention.local_attention;
        for (c, ca) in self.classes.iter().enumerate() {
            if ca.sum == 0.0 {
                continue;
            }
            let g = dr.plane(c);
            let rc = r.plane(c);
            let dot: f64 = g.iter().zip(rc).map(|(a, b)| a * b).sum();
            let dresized: Vec<f64> = g.iter().map(|v| (v - dot) / ca.sum).collect();
            let dmap = ca.resize.apply_transpose(&dresized);
            let level = &mut dcls[ca.level];
            let plane = level.plane_len();
            for i in 0..plane {
                let q = ca.probs[i];
                let ch = out.cls_channel(ca.argmax[i], c);
                level.data[ch * plane + i] += dmap[i] * q * (1.0 - q);
            }
        }
        dcls
    }
}

/// Writes one attention plane as an 8-bit grayscale PNG, min-max scaled.
pub fn save_attention_png(plane: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = plane
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}
