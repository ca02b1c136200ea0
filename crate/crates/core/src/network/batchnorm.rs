//! Batch normalization over the rows of a `(samples, features)` matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Saved activations for the training-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Batch statistics observed in one training forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    pub fn zeros(features: usize) -> Self {
        Self {
            gamma: Array1::zeros(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::zeros(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the statistics of `x` itself (biased variance).
    pub fn forward_train(&self, x: ArrayView2<f64>, eps: f64) -> (Array2<f64>, BnCache, BnStats) {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, BnCache { xhat, inv_std }, BnStats { mean, var })
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>, eps: f64) -> Array2<f64> {
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + eps).sqrt());
        let shift = &self.beta - &(&self.running_mean * &scale);
        &x * &scale + &shift
    }

    /// Returns `dL/dx`; accumulates `dL/dgamma` and `dL/dbeta` into `grads`.
    pub fn backward(&self, dy: ArrayView2<f64>, cache: &BnCache, grads: &mut BatchNorm) -> Array2<f64> {
        let n = dy.nrows().max(1) as f64;
        let dbeta = dy.sum_axis(Axis(0));
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dxhat_scale = &self.gamma * &cache.inv_std / n;
        let dx = (&dy * n - &dbeta - &(&cache.xhat * &dgamma)) * &dxhat_scale;
        grads.gamma += &dgamma;
        grads.beta += &dbeta;
        dx
    }

    /// Exponential moving average: `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BnStats, momentum: f64) {
        self.running_mean
            .zip_mut_with(&stats.mean, |r, &m| *r = (1.0 - momentum) * *r + momentum * m);
        self.running_var
            .zip_mut_with(&stats.var, |r, &v| *r = (1.0 - momentum) * *r + momentum * v);
    }
}
