//! Small convolutional stack used as the desk-scale image backbone.
//!
//! Stride-1 same-padding convolutions via im2col, each followed by an
//! activation and an optional average pool. Batches are `(N, C, H, W)`.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::{take_one, Activation};

/// `k x k` convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd for same padding");
        let fan_in = (in_c * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Array4::from_shape_fn((out_c, in_c, k, k), |_| rng.gen_range(-bound..bound));
        let b = Array1::from_shape_fn(out_c, |_| rng.gen_range(-bound..bound));
        Self { w, b }
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    /// Lays out `k x k` patches as rows: `(H * W, C * k * k)`.
    fn im2col(&self, x: &ndarray::ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let pad = k / 2;
        let mut cols = Array2::zeros((h * w, c * k * k));
        for yy in 0..h {
            for xx in 0..w {
                let row = yy * w + xx;
                for cc in 0..c {
                    for dy in 0..k {
                        let sy = yy + dy;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = xx + dx;
                            if sx < pad || sx - pad >= w {
                                continue;
                            }
                            cols[(row, cc * k * k + dy * k + dx)] = x[(cc, sy - pad, sx - pad)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn w_matrix(&self) -> Array2<f64> {
        let (oc, ic, k, _) = (
            self.w.shape()[0],
            self.w.shape()[1],
            self.w.shape()[2],
            self.w.shape()[3],
        );
        self.w
            .to_shape((oc, ic * k * k))
            .expect("contiguous kernel")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let oc = self.out_channels();
        let w_mat = self.w_matrix();
        let mut out = Array4::zeros((n, oc, h, w));
        for i in 0..n {
            let cols = self.im2col(&x.index_axis(Axis(0), i));
            let out_mat = cols.dot(&w_mat.t()) + &self.b; // (H*W, OC)
            let mut dst = out.index_axis_mut(Axis(0), i);
            for ch in 0..oc {
                for yy in 0..h {
                    for xx in 0..w {
                        dst[(ch, yy, xx)] = out_mat[(yy * w + xx, ch)];
                    }
                }
            }
        }
        out
    }

    /// Returns `(dW, db, dX)` given the layer input and the gradient on
    /// the pre-activation output.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        grad_out: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = self.kernel();
        let pad = k / 2;
        let oc = self.out_channels();
        let w_mat = self.w_matrix();
        let mut dw_mat = Array2::<f64>::zeros((oc, c * k * k));
        let mut db = Array1::<f64>::zeros(oc);
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        for i in 0..n {
            let cols = self.im2col(&x.index_axis(Axis(0), i));
            let go = grad_out.index_axis(Axis(0), i);
            let mut go_mat = Array2::zeros((h * w, oc));
            for ch in 0..oc {
                for yy in 0..h {
                    for xx in 0..w {
                        go_mat[(yy * w + xx, ch)] = go[(ch, yy, xx)];
                    }
                }
            }
            dw_mat += &go_mat.t().dot(&cols);
            db += &go_mat.sum_axis(Axis(0));
            let dcols = go_mat.dot(&w_mat); // (H*W, C*k*k)
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            for yy in 0..h {
                for xx in 0..w {
                    let row = yy * w + xx;
                    for cc in 0..c {
                        for dy in 0..k {
                            let sy = yy + dy;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            for dxk in 0..k {
                                let sx = xx + dxk;
                                if sx < pad || sx - pad >= w {
                                    continue;
                                }
                                dxi[(cc, sy - pad, sx - pad)] +=
                                    dcols[(row, cc * k * k + dy * k + dxk)];
                            }
                        }
                    }
                }
            }
        }
        let dw = dw_mat
            .into_shape_with_order((oc, c, k, k))
            .expect("kernel shape");
        (dw, db, dx)
    }
}

/// Non-overlapping average pooling.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2d {
    pub size: usize,
}

impl AvgPool2d {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let s = self.size;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(h % s == 0 && w % s == 0, "pool size must divide the spatial dims");
        let (oh, ow) = (h / s, w / s);
        let norm = 1.0 / (s * s) as f64;
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for cc in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..s {
                            for dx in 0..s {
                                acc += x[(i, cc, oy * s + dy, ox * s + dx)];
                            }
                        }
                        out[(i, cc, oy, ox)] = acc * norm;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, grad_out: &Array4<f64>, input_hw: (usize, usize)) -> Array4<f64> {
        let s = self.size;
        let (n, c, oh, ow) = (
            grad_out.shape()[0],
            grad_out.shape()[1],
            grad_out.shape()[2],
            grad_out.shape()[3],
        );
        let norm = 1.0 / (s * s) as f64;
        let mut dx = Array4::zeros((n, c, input_hw.0, input_hw.1));
        for i in 0..n {
            for cc in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out[(i, cc, oy, ox)] * norm;
                        for dy in 0..s {
                            for dx_ in 0..s {
                                dx[(i, cc, oy * s + dy, ox * s + dx_)] = g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    act: Activation,
    pool: Option<AvgPool2d>,
}

/// Convolution stack ending in a flatten: `(N, C, H, W) -> (N, v_dim)`.
#[derive(Debug, Clone)]
pub struct ConvNet {
    blocks: Vec<ConvBlock>,
    input_shape: (usize, usize, usize),
}

/// Per-block tensors retained for the backward pass.
pub struct ConvNetCache {
    /// Input to each block's convolution.
    conv_inputs: Vec<Array4<f64>>,
    /// Activation output of each block (pre-pool).
    act_outputs: Vec<Array4<f64>>,
    output_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvNetGrad {
    pub layers: Vec<(Array4<f64>, Array1<f64>)>,
}

impl ConvNet {
    /// One block per entry of `channels`, each `3x3 -> act -> 2x2 pool`.
    pub fn new<R: Rng>(
        input_shape: (usize, usize, usize),
        channels: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut in_c = input_shape.0;
        let mut blocks = Vec::with_capacity(channels.len());
        for &out_c in channels {
            blocks.push(ConvBlock {
                conv: Conv2d::new(in_c, out_c, 3, rng),
                act,
                pool: Some(AvgPool2d { size: 2 }),
            });
            in_c = out_c;
        }
        Self {
            blocks,
            input_shape,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn out_dim(&self) -> usize {
        let (mut c, mut h, mut w) = self.input_shape;
        for block in &self.blocks {
            c = block.conv.out_channels();
            if let Some(pool) = block.pool {
                h /= pool.size;
                w /= pool.size;
            }
        }
        c * h * w
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array2<f64> {
        let cache = self.forward_cached(x);
        Self::flatten(cache.pooled_output(self))
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> ConvNetCache {
        let mut conv_inputs = Vec::with_capacity(self.blocks.len());
        let mut act_outputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            conv_inputs.push(cur.clone());
            let mut a = block.conv.forward(&cur);
            block.act.apply_inplace(&mut a);
            act_outputs.push(a.clone());
            cur = match block.pool {
                Some(pool) => pool.forward(&a),
                None => a,
            };
        }
        let output_shape = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
        ConvNetCache {
            conv_inputs,
            act_outputs,
            output_shape,
        }
    }

    fn flatten(x: Array4<f64>) -> Array2<f64> {
        let n = x.shape()[0];
        let dim = x.len() / n;
        x.into_shape_with_order((n, dim)).expect("contiguous")
    }

    /// Gradients for all blocks given the gradient on the flattened output.
    pub fn backward(&self, cache: &ConvNetCache, grad_flat: &Array2<f64>) -> ConvNetGrad {
        let n = grad_flat.shape()[0];
        let (c, h, w) = cache.output_shape;
        let mut upstream = grad_flat
            .to_owned()
            .into_shape_with_order((n, c, h, w))
            .expect("flatten shape");
        let mut layers = vec![(Array4::zeros((0, 0, 0, 0)), Array1::zeros(0)); self.blocks.len()];
        for (l, block) in self.blocks.iter().enumerate().rev() {
            if let Some(pool) = block.pool {
                let hw = (
                    cache.act_outputs[l].shape()[2],
                    cache.act_outputs[l].shape()[3],
                );
                upstream = pool.backward(&upstream, hw);
            }
            let dpre = &upstream * &block.act.derivative_from_output(&cache.act_outputs[l]);
            let (dw, db, dx) = block.conv.backward(&cache.conv_inputs[l], &dpre);
            layers[l] = (dw, db);
            upstream = dx;
        }
        ConvNetGrad { layers }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().map(|b| &b.conv)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.w.len() + b.conv.b.len())
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for block in &self.blocks {
            out.extend(block.conv.w.iter());
            out.extend(block.conv.b.iter());
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        for block in &mut self.blocks {
            for w in block.conv.w.iter_mut() {
                *w = take_one(src);
            }
            for b in block.conv.b.iter_mut() {
                *b = take_one(src);
            }
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter size mismatch");
        let mut src = flat;
        self.read_params(&mut src);
    }
}

impl ConvNetCache {
    fn pooled_output(&self, net: &ConvNet) -> Array4<f64> {
        let last = self
            .act_outputs
            .last()
            .expect("cache holds at least one block");
        match net.blocks.last().expect("non-empty").pool {
            Some(pool) => pool.forward(last),
            None => last.clone(),
        }
    }

    /// Flattened network output recomputed from the cache.
    pub fn output(&self, net: &ConvNet) -> Array2<f64> {
        ConvNet::flatten(self.pooled_output(net))
    }
}

impl ConvNetGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (dw, db) in &self.layers {
            out.extend(dw.iter());
            out.extend(db.iter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_relative_error, numeric_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, &mut rng);
        conv.w.fill(0.0);
        conv.w[(0, 0, 1, 1)] = 1.0;
        conv.b.fill(0.0);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward(&x);
        assert!(x
            .iter()
            .zip(y.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn avg_pool_halves_dims() {
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, y, xx)| (c * 16 + y * 4 + xx) as f64);
        let pool = AvgPool2d { size: 2 };
        let y = pool.forward(&x);
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!((y[(0, 0, 0, 0)] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn convnet_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ConvNet::new((2, 4, 4), &[3], Activation::Tanh, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let loss_of = |flat: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(flat);
            n.forward(&x).mapv(|v| v * v).sum()
        };
        let cache = net.forward_cached(&x);
        let out = cache.output(&net);
        let grads = net.backward(&cache, &(out * 2.0));
        let numeric = numeric_gradient(loss_of, &net.flat_params(), 1e-4);
        let err = gradient_relative_error(&grads.flat(), &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }
}
