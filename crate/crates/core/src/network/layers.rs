//! Dense layers, activations and dropout.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `dL/dx` and accumulates parameter gradients. The bias
    /// gradient is the column sum of `dout`.
    pub fn backward(&self, x: ArrayView2<f64>, dout: ArrayView2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(&dout);
        grads.bias += &dout.sum_axis(Axis(0));
        dout.dot(&self.weight.t())
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(dout: &Array2<f64>, output: &Array2<f64>) -> Array2<f64> {
    let mut dx = dout.clone();
    dx.zip_mut_with(output, |d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Vector-Jacobian product of row-wise softmax: `p ⊙ (dp - <dp, p>)`.
pub fn softmax_backward(probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, dp), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let inner = p.dot(&dp);
        o.assign(&(&p * &(&dp - inner)));
    }
    out
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
