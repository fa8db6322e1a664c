use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use super::ParamLayout;
use crate::tensor::Tensor3;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: usize,
    pub bias: Option<usize>,
}

/// Unfolded input kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = layout.alloc(format!("{name}.weight"), out_ch * in_ch * kernel * kernel);
        let bias = bias.then(|| layout.alloc(format!("{name}.bias"), out_ch));
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.fan_in()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_view<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.out_ch, self.fan_in()),
            &params[self.weight..self.weight + self.weight_len()],
        )
        .expect("weight slice shape")
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Array2<f64> {
        let k = self.kernel;
        let mut cols = Array2::<f64>::zeros((self.fan_in(), oh * ow));
        for ic in 0..self.in_ch {
            let plane = x.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < x.width {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_h: usize, in_w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let mut dx = Tensor3::zeros(self.in_ch, in_h, in_w);
        for ic in 0..self.in_ch {
            let plane = dx.plane_mut(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let src = dcols.row(row);
                    let src = src.as_slice().expect("contiguous row");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let base = iy as usize * in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < in_w {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> (Tensor3, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let mut out = Array2::<f64>::zeros((self.out_ch, oh * ow));
        general_mat_mul(1.0, &self.weight_view(params), &cols, 0.0, &mut out);
        if let Some(b) = self.bias {
            for (oc, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let bias = params[b + oc];
                row.mapv_inplace(|v| v + bias);
            }
        }
        let (data, _) = out.into_raw_vec_and_offset();
        (
            Tensor3::from_vec(self.out_ch, oh, ow, data),
            ConvCache {
                cols,
                in_h: x.height,
                in_w: x.width,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient
    /// when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &Tensor3,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let p = dy.height * dy.width;
        let dy_mat = ArrayView2::from_shape((self.out_ch, p), &dy.data).expect("dy shape");
        {
            let gw = &mut grads[self.weight..self.weight + self.weight_len()];
            let mut gw = ArrayViewMut2::from_shape((self.out_ch, self.fan_in()), gw).expect("gw shape");
            general_mat_mul(1.0, &dy_mat, &cache.cols.t(), 1.0, &mut gw);
        }
        if let Some(b) = self.bias {
            for oc in 0..self.out_ch {
                grads[b + oc] += dy.plane(oc).iter().sum::<f64>();
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros((self.fan_in(), p));
        general_mat_mul(1.0, &self.weight_view(params).t(), &dy_mat, 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache.in_h, cache.in_w, dy.height, dy.width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(c: &Conv2d, params: &[f64], x: &Tensor3) -> Tensor3 {
        let (oh, ow) = c.out_size(x.height, x.width);
        let mut out = Tensor3::zeros(c.out_ch, oh, ow);
        for oc in 0..c.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.map(|b| params[b + oc]).unwrap_or(0.0);
                    for ic in 0..c.in_ch {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let w = params[c.weight + ((oc * c.in_ch + ic) * c.kernel + ky) * c.kernel + kx];
                                acc += w * x.get(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(oc, oy, ox, acc);
                }
            }
        }
        out
    }

    fn setup(stride: usize, kernel: usize) -> (Conv2d, Vec<f64>, Tensor3) {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, kernel, stride, true);
        let params: Vec<f64> = (0..layout.total()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0).collect();
        let x = Tensor3::from_vec(2, 6, 6, (0..72).map(|i| ((i * 13 % 11) as f64) / 7.0 - 0.5).collect());
        (conv, params, x)
    }

    #[test]
    fn matches_naive_convolution() {
        for (stride, kernel) in [(1, 3), (2, 3), (1, 1)] {
            let (conv, params, x) = setup(stride, kernel);
            let (y, _) = conv.forward(&params, &x);
            let r = naive_conv(&conv, &params, &x);
            assert!(y.same_shape(&r));
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (conv, mut params, mut x) = setup(2, 3);
        let (y, cache) = conv.forward(&params, &x);
        // loss = sum(y * g) with a fixed g
        let g = y.map(|v| (v * 3.0).sin());
        let loss = |p: &[f64], x: &Tensor3| -> f64 {
            let (y, _) = conv.forward(p, x);
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; params.len()];
        let dx = conv.backward(&params, &cache, &g, &mut grads, true).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let lp = loss(&params, &x);
            params[i] = orig - h;
            let lm = loss(&params, &x);
            params[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - grads[i]).abs() < 1e-6);
        }
        for i in 0..x.data.len() {
            let orig = x.data[i];
            x.data[i] = orig + h;
            let lp = loss(&params, &x);
            x.data[i] = orig - h;
            let lm = loss(&params, &x);
            x.data[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
    }
}
