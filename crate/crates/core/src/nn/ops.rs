use crate::tensor::Tensor3;

pub fn relu_inplace(x: &mut Tensor3) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by the post-activation output `y`.
pub fn relu_backward(y: &Tensor3, dy: &mut Tensor3) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn upsample2_nearest(x: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(x.channels, x.height * 2, x.width * 2);
    for c in 0..x.channels {
        for y in 0..out.height {
            for xx in 0..out.width {
                let v = x.get(c, y / 2, xx / 2);
                out.set(c, y, xx, v);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(dy.channels, dy.height / 2, dy.width / 2);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                let i = dx.idx(c, y / 2, x / 2);
                dx.data[i] += dy.get(c, y, x);
            }
        }
    }
    dx
}

/// Bilinear resampling of a single plane (half-pixel centres, edge clamped),
/// stored as four taps per output pixel so the transpose is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Resize {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(out_i: usize, in_n: usize, out_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

impl Resize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis_taps(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis_taps(ox, in_w, out_w);
                taps.push([
                    (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * in_w + x1, (1.0 - fy) * fx),
                    (y1 * in_w + x0, fy * (1.0 - fx)),
                    (y1 * in_w + x1, fy * fx),
                ]);
            }
        }
        Resize {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.in_h * self.in_w);
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * src[i]).sum())
            .collect()
    }

    /// Transpose of [`Resize::apply`].
    pub fn apply_transpose(&self, dout: &[f64]) -> Vec<f64> {
        let mut din = vec![0.0; self.in_h * self.in_w];
        for (t, &g) in self.taps.iter().zip(dout) {
            for &(i, w) in t {
                din[i] += w * g;
            }
        }
        din
    }
}
