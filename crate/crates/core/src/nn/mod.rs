//! Minimal dense/convolutional layers with hand-derived backward passes.
//!
//! Everything is `f64`. Layers expose `forward`, `forward_cached` and
//! `backward`; parameters flatten to contiguous `Vec<f64>` buffers in a
//! fixed order so optimizers, checkpoints and checksums all agree on the
//! layout.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::{AvgPool2d, Conv2d, ConvNet, ConvNetCache, ConvNetGrad};

use ndarray::{Array1, Array2, ArrayView1, Axis, Dimension};
use rand::Rng;

/// Elementwise nonlinearity. Derivatives are taken from the activation
/// output, which is enough for these three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply_inplace<D: Dimension>(&self, x: &mut ndarray::Array<f64, D>) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// d(act)/d(pre-activation) expressed through the activation output.
    pub fn derivative_from_output<D: Dimension>(
        &self,
        output: &ndarray::Array<f64, D>,
    ) -> ndarray::Array<f64, D> {
        match self {
            Activation::Identity => ndarray::Array::ones(output.raw_dim()),
            Activation::Tanh => output.mapv(|y| 1.0 - y * y),
            Activation::Relu => output.mapv(|y| if y > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

/// Fully connected layer `y = act(x W + b)` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl Dense {
    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, act: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..bound));
        let b = Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound));
        Self { w, b, act }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w) + &self.b;
        self.act.apply_inplace(&mut y);
        y
    }
}

/// Gradients for one dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Post-activation outputs of every layer, plus the input. `acts[0]` is
/// the input batch, `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Per-layer gradients in layer order.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<DenseGrad>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden_act`, the
    /// last layer `out_act`.
    pub fn new<R: Rng>(dims: &[usize], hidden_act: Activation, out_act: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let act = if i + 2 == dims.len() { out_act } else { hidden_act };
                Dense::new(pair[0], pair[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        MlpCache { acts }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the final output) and
    /// returns parameter gradients plus the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> (MlpGrad, Array2<f64>) {
        assert_eq!(cache.acts.len(), self.layers.len() + 1);
        let mut grads = vec![
            DenseGrad {
                dw: Array2::zeros((0, 0)),
                db: Array1::zeros(0),
            };
            self.layers.len()
        ];
        let mut upstream = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.acts[l + 1];
            let x = &cache.acts[l];
            let dpre = &upstream * &layer.act.derivative_from_output(y);
            grads[l] = DenseGrad {
                dw: x.t().dot(&dpre),
                db: dpre.sum_axis(Axis(0)),
            };
            upstream = dpre.dot(&layer.w.t());
        }
        (MlpGrad { layers: grads }, upstream)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = take_one(src);
            }
            for b in layer.b.iter_mut() {
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

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.dw.iter());
            out.extend(g.db.iter());
        }
        out
    }

    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrad {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    dw: Array2::zeros(l.w.raw_dim()),
                    db: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw += &b.dw;
            a.db += &b.db;
        }
    }
}

pub(crate) fn take_one(src: &mut &[f64]) -> f64 {
    let (head, tail) = src.split_first().expect("parameter buffer exhausted");
    *src = tail;
    *head
}

/// Row-wise softmax with the usual max-subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax of a single logit vector.
pub fn softmax_vec(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Central finite differences of a scalar function; the independent
/// oracle for every analytic gradient in this crate.
pub fn numeric_gradient<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error between two gradient vectors:
/// `||a - n|| / max(||a||, ||n||)`, with an absolute floor for the
/// degenerate all-zero case.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// SHA-256 over the little-endian bytes of a parameter buffer.
pub fn param_checksum(flat: &[f64]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in flat {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn checksum_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
