//! The toy detector: four stride-2 blocks, a top-down pyramid, shared dense heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::daa::GlobalHead;
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, upsample2_backward, upsample2_nearest, Conv2d, ConvCache, ParamLayout,
};
use crate::tensor::Tensor3;
use crate::types::{Config, Image};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub levels: usize,
    pub anchors: usize,
    pub prior_prob: f64,
}

impl From<&Config> for NetConfig {
    fn from(c: &Config) -> Self {
        NetConfig {
            num_classes: c.num_classes,
            channels: c.channels,
            levels: c.pyramid_levels,
            anchors: c.anchor_scales,
            prior_prob: c.prior_prob,
        }
    }
}

/// Dense outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidOutputs {
    /// Per level, `N·A` logit channels; channel `a·N + c` is class `c` at anchor slot `a`.
    pub cls_logits: Vec<Tensor3>,
    /// Per level, `4·A` channels; channel `a·4 + k` is offset `k` at anchor slot `a`.
    pub reg: Vec<Tensor3>,
    /// Backbone feature map ℳ feeding the global head (stride 8).
    pub feature: Tensor3,
    /// Global attention map 𝒳 (`N` channels, same grid as `feature`).
    pub global_attention: Tensor3,
    pub num_classes: usize,
    pub anchors: usize,
}

impl PyramidOutputs {
    pub fn levels(&self) -> usize {
        self.cls_logits.len()
    }

    #[inline]
    pub fn cls_channel(&self, a: usize, c: usize) -> usize {
        a * self.num_classes + c
    }

    /// Sigmoid probabilities, same layout as `cls_logits`.
    pub fn cls_probs(&self) -> Vec<Tensor3> {
        self.cls_logits
            .iter()
            .map(|t| t.map(crate::numeric::sigmoid))
            .collect()
    }
}

/// Per-image gradients of the loss with respect to each network output.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub cls_logits: Vec<Tensor3>,
    pub reg: Vec<Tensor3>,
    /// Extra gradient reaching ℳ directly (feature aggregation).
    pub feature: Tensor3,
    pub global_attention: Tensor3,
}

impl OutputGrads {
    pub fn zeros_like(out: &PyramidOutputs) -> Self {
        OutputGrads {
            cls_logits: out.cls_logits.iter().map(Tensor3::zeros_like).collect(),
            reg: out.reg.iter().map(Tensor3::zeros_like).collect(),
            feature: out.feature.zeros_like(),
            global_attention: out.global_attention.zeros_like(),
        }
    }
}

struct HeadCache {
    conv: ConvCache,
    hidden: Tensor3,
    out: ConvCache,
}

/// Everything the backward pass needs from the forward pass.
pub struct ForwardCache {
    stem: Vec<(ConvCache, Tensor3)>,
    lat3: ConvCache,
    lat4: ConvCache,
    /// Extra levels: conv cache and the (activated) input it consumed.
    extra: Vec<(ConvCache, Tensor3)>,
    cls: Vec<HeadCache>,
    reg: Vec<HeadCache>,
    global: ConvCache,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    layout: ParamLayout,
    stem: Vec<Conv2d>,
    lat3: Conv2d,
    lat4: Conv2d,
    extra: Vec<Conv2d>,
    cls_conv: Conv2d,
    cls_out: Conv2d,
    reg_conv: Conv2d,
    reg_out: Conv2d,
    pub global: GlobalHead,
}

/// Parameter name prefix of the local (dense) classification head.
pub const CLS_HEAD_PREFIX: &str = "head.cls";

impl Network {
    pub fn new(config: NetConfig) -> Self {
        let d = config.channels;
        let d1 = (d / 2).max(1);
        let mut layout = ParamLayout::default();
        let stem = vec![
            Conv2d::new(&mut layout, "backbone.conv1", 1, d1, 3, 2, true),
            Conv2d::new(&mut layout, "backbone.conv2", d1, d, 3, 2, true),
            Conv2d::new(&mut layout, "backbone.conv3", d, d, 3, 2, true),
            Conv2d::new(&mut layout, "backbone.conv4", d, d, 3, 2, true),
        ];
        let lat3 = Conv2d::new(&mut layout, "fpn.lat3", d, d, 1, 1, true);
        let lat4 = Conv2d::new(&mut layout, "fpn.lat4", d, d, 1, 1, true);
        let extra = (2..config.levels)
            .map(|m| Conv2d::new(&mut layout, &format!("fpn.extra{m}"), d, d, 3, 2, true))
            .collect();
        let na = config.num_classes * config.anchors;
        let cls_conv = Conv2d::new(&mut layout, "head.cls.conv", d, d, 3, 1, true);
        let cls_out = Conv2d::new(&mut layout, "head.cls.out", d, na, 3, 1, true);
        let reg_conv = Conv2d::new(&mut layout, "head.reg.conv", d, d, 3, 1, true);
        let reg_out = Conv2d::new(&mut layout, "head.reg.out", d, 4 * config.anchors, 3, 1, true);
        let global = GlobalHead::new(&mut layout, d, config.num_classes);
        Network {
            config,
            layout,
            stem,
            lat3,
            lat4,
            extra,
            cls_conv,
            cls_out,
            reg_conv,
            reg_out,
            global,
        }
    }

    pub fn from_config(config: &Config) -> Self {
        Network::new(NetConfig::from(config))
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    /// He-normal convolutions, small-std output layers, classification bias at the prior.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        let fill = |conv: &Conv2d, std: f64, p: &mut [f64], rng: &mut R| {
            let normal = Normal::new(0.0, std).expect("valid std");
            for w in &mut p[conv.weight..conv.weight + conv.weight_len()] {
                *w = normal.sample(rng);
            }
        };
        let he = |c: &Conv2d| (2.0 / c.fan_in() as f64).sqrt();
        for c in self
            .stem
            .iter()
            .chain([&self.lat3, &self.lat4])
            .chain(self.extra.iter())
            .chain([&self.cls_conv, &self.reg_conv])
        {
            fill(c, he(c), &mut p, rng);
        }
        fill(&self.cls_out, 0.01, &mut p, rng);
        fill(&self.reg_out, 0.01, &mut p, rng);
        fill(&self.global.conv, (1.0 / self.global.conv.fan_in() as f64).sqrt(), &mut p, rng);
        let prior = self.config.prior_prob;
        let bias = -((1.0 - prior) / prior).ln();
        let b = self.cls_out.bias.expect("cls bias");
        for v in &mut p[b..b + self.cls_out.out_ch] {
            *v = bias;
        }
        p
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let div = 1usize << (self.config.levels + 2);
        if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
            return Err(Error::Shape(format!(
                "input {width}x{height} must be a positive multiple of {div} for {} pyramid levels",
                self.config.levels
            )));
        }
        Ok(())
    }

    fn head_forward(
        &self,
        params: &[f64],
        conv: &Conv2d,
        out: &Conv2d,
        x: &Tensor3,
    ) -> (Tensor3, HeadCache) {
        let (mut hidden, c1) = conv.forward(params, x);
        relu_inplace(&mut hidden);
        let (y, c2) = out.forward(params, &hidden);
        (
            y,
            HeadCache {
                conv: c1,
                hidden,
                out: c2,
            },
        )
    }

    pub fn forward(&self, params: &[f64], image: &Image) -> Result<(PyramidOutputs, ForwardCache)> {
        self.check_input(image.height, image.width)?;
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut x = Tensor3::from_vec(1, image.height, image.width, image.data.clone());
        let mut stem_cache = Vec::with_capacity(4);
        for conv in &self.stem {
            let (mut y, cache) = conv.forward(params, &x);
            relu_inplace(&mut y);
            stem_cache.push((cache, y.clone()));
            x = y;
        }
        let c3 = stem_cache[2].1.clone();
        let c4 = x;

        let (p4, lat4) = self.lat4.forward(params, &c4);
        let (mut p3, lat3) = self.lat3.forward(params, &c3);
        p3.add_assign(&upsample2_nearest(&p4));
        let mut levels = vec![p3, p4];
        let mut extra = Vec::with_capacity(self.extra.len());
        for (i, conv) in self.extra.iter().enumerate() {
            let input = if i == 0 {
                c4.clone()
            } else {
                let mut t = levels.last().expect("previous level").clone();
                relu_inplace(&mut t);
                t
            };
            let (y, cache) = conv.forward(params, &input);
            extra.push((cache, input));
            levels.push(y);
        }

        let mut cls_logits = Vec::with_capacity(levels.len());
        let mut reg = Vec::with_capacity(levels.len());
        let mut cls_cache = Vec::with_capacity(levels.len());
        let mut reg_cache = Vec::with_capacity(levels.len());
        for p in &levels {
            let (c, cc) = self.head_forward(params, &self.cls_conv, &self.cls_out, p);
            let (r, rc) = self.head_forward(params, &self.reg_conv, &self.reg_out, p);
            cls_logits.push(c);
            reg.push(r);
            cls_cache.push(cc);
            reg_cache.push(rc);
        }

        let (global_attention, global) = self.global.forward(params, &c3);
        let outputs = PyramidOutputs {
            cls_logits,
            reg,
            feature: c3,
            global_attention,
            num_classes: self.config.num_classes,
            anchors: self.config.anchors,
        };
        Ok((
            outputs,
            ForwardCache {
                stem: stem_cache,
                lat3,
                lat4,
                extra,
                cls: cls_cache,
                reg: reg_cache,
                global,
            },
        ))
    }

    /// Inference-only forward.
    pub fn predict(&self, params: &[f64], image: &Image) -> Result<PyramidOutputs> {
        Ok(self.forward(params, image)?.0)
    }

    fn head_backward(
        &self,
        params: &[f64],
        conv: &Conv2d,
        out: &Conv2d,
        cache: &HeadCache,
        dy: &Tensor3,
        grads: &mut [f64],
    ) -> Tensor3 {
        let mut dh = out
            .backward(params, &cache.out, dy, grads, true)
            .expect("input grad");
        relu_backward(&cache.hidden, &mut dh);
        conv.backward(params, &cache.conv, &dh, grads, true)
            .expect("input grad")
    }

    /// Accumulates parameter gradients for the given output gradients into `grads`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, g: &OutputGrads, grads: &mut [f64]) {
        let m_levels = g.cls_logits.len();
        let mut dlevels: Vec<Tensor3> = Vec::with_capacity(m_levels);
        for m in 0..m_levels {
            let mut d = self.head_backward(params, &self.cls_conv, &self.cls_out, &cache.cls[m], &g.cls_logits[m], grads);
            let dr = self.head_backward(params, &self.reg_conv, &self.reg_out, &cache.reg[m], &g.reg[m], grads);
            d.add_assign(&dr);
            dlevels.push(d);
        }

        let c3 = &cache.stem[2].1;
        let c4 = &cache.stem[3].1;
        let mut dc4 = c4.zeros_like();
        for i in (0..self.extra.len()).rev() {
            let m = i + 2;
            let (conv_cache, input) = &cache.extra[i];
            let mut dx = self.extra[i]
                .backward(params, conv_cache, &dlevels[m], grads, true)
                .expect("input grad");
            if i == 0 {
                dc4.add_assign(&dx);
            } else {
                relu_backward(input, &mut dx);
                dlevels[m - 1].add_assign(&dx);
            }
        }
        let mut dc3 = self.lat3.backward(params, &cache.lat3, &dlevels[0], grads, true).expect("input grad");
        let up = upsample2_backward(&dlevels[0]);
        dlevels[1].add_assign(&up);
        dc4.add_assign(&self.lat4.backward(params, &cache.lat4, &dlevels[1], grads, true).expect("input grad"));

        dc3.add_assign(&self.global.backward(params, &cache.global, &g.global_attention, grads));
        dc3.add_assign(&g.feature);

        // backbone: relu mask with each block's own output, then the conv
        let mut d = dc4;
        relu_backward(c4, &mut d);
        d = self.stem[3].backward(params, &cache.stem[3].0, &d, grads, true).expect("input grad");
        d.add_assign(&dc3);
        relu_backward(c3, &mut d);
        d = self.stem[2].backward(params, &cache.stem[2].0, &d, grads, true).expect("input grad");
        relu_backward(&cache.stem[1].1, &mut d);
        d = self.stem[1].backward(params, &cache.stem[1].0, &d, grads, true).expect("input grad");
        relu_backward(&cache.stem[0].1, &mut d);
        self.stem[0].backward(params, &cache.stem[0].0, &d, grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Network {
        Network::new(NetConfig {
            num_classes: 3,
            channels: 4,
            levels: 3,
            anchors: 3,
            prior_prob: 0.01,
        })
    }

    fn image(n: usize) -> Image {
        Image {
            width: n,
            height: n,
            data: (0..n * n).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect(),
        }
    }

    #[test]
    fn output_shapes() {
        let net = small();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let (out, _) = net.forward(&params, &image(64)).unwrap();
        let shapes: Vec<_> = out.cls_logits.iter().map(|t| (t.width, t.height, t.channels)).collect();
        assert_eq!(shapes, vec![(8, 8, 9), (4, 4, 9), (2, 2, 9)]);
        assert_eq!(out.reg[1].channels, 12);
        assert_eq!((out.global_attention.channels, out.global_attention.height), (3, 8));
        assert_eq!(out.feature.height, 8);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let net = small();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(net.forward(&params, &image(48)).is_err());
    }

    #[test]
    fn deterministic_and_prior_initialised() {
        let net = small();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let a = net.predict(&params, &image(64)).unwrap();
        let b = net.predict(&params, &image(64)).unwrap();
        assert_eq!(a, b);
        for t in a.cls_probs() {
            for &p in &t.data {
                assert!((p - 0.01).abs() < 0.005, "p={p}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = small();
        let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        // larger output weights so every path carries signal
        for v in params.iter_mut() {
            *v *= 1.5;
        }
        let img = image(32 * 2);
        let (out, cache) = net.forward(&params, &img).unwrap();
        let mut g = OutputGrads::zeros_like(&out);
        let wave = |t: &mut Tensor3, k: f64| {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = (i as f64 * k).sin();
            }
        };
        for (m, t) in g.cls_logits.iter_mut().enumerate() {
            wave(t, 0.3 + m as f64);
        }
        for (m, t) in g.reg.iter_mut().enumerate() {
            wave(t, 0.7 + m as f64);
        }
        wave(&mut g.feature, 1.1);
        wave(&mut g.global_attention, 0.9);
        let dot = |a: &Tensor3, b: &Tensor3| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        let objective = |p: &[f64]| -> f64 {
            let (o, _) = net.forward(p, &img).unwrap();
            let mut s = dot(&o.feature, &g.feature) + dot(&o.global_attention, &g.global_attention);
            for m in 0..o.levels() {
                s += dot(&o.cls_logits[m], &g.cls_logits[m]) + dot(&o.reg[m], &g.reg[m]);
            }
            s
        };
        let mut grads = vec![0.0; params.len()];
        net.backward(&params, &cache, &g, &mut grads);
        let h = 1e-6;
        let mut checked = 0;
        for slot in net.layout().slots() {
            for k in [0, slot.len / 2, slot.len - 1] {
                let i = slot.offset + k;
                let orig = params[i];
                params[i] = orig + h;
                let lp = objective(&params);
                params[i] = orig - h;
                let lm = objective(&params);
                params[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                let err = (num - grads[i]).abs() / num.abs().max(grads[i].abs()).max(1e-6);
                assert!(err < 1e-4, "{} [{k}]: analytic {} numeric {num}", slot.name, grads[i]);
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
