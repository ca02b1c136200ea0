//! Gated recurrent units and the bidirectional layer built from them.
//!
//! Gate blocks are stacked along the last weight axis in the order
//! `[update, reset, candidate]`, so for hidden size `H` the input weight is
//! `(in, 3H)`, the recurrent weight `(H, 3H)` and the bias `3H`. One step is
//!
//! ```text
//! z = σ(x·Wz + h·Uz + bz)
//! r = σ(x·Wr + h·Ur + br)
//! ĥ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
//! h' = (1 - z) ⊙ h + z ⊙ ĥ
//! ```
//!
//! When the layer uses batch norm, the input contribution `x·W` is
//! normalized over all frames of the batch before the recurrence.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNorm, BnCache, BnStats};

/// Which side of the update gate keeps the previous state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GruConvention {
    /// `h' = (1 - z) ⊙ h + z ⊙ ĥ`
    #[default]
    UpdateSelectsCandidate,
    /// `h' = z ⊙ h + (1 - z) ⊙ ĥ`
    UpdateSelectsPrevious,
}

/// How the two directions of a bidirectional layer are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMerge {
    #[default]
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub input_weight: Array2<f64>,
    pub recurrent_weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BatchNorm>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    candidate: Array1<f64>,
}

impl GruDirection {
    pub fn zeros(input: usize, hidden: usize, batch_norm: bool) -> Self {
        Self {
            input_weight: Array2::zeros((input, 3 * hidden)),
            recurrent_weight: Array2::zeros((hidden, 3 * hidden)),
            bias: Array1::zeros(3 * hidden),
            bn: batch_norm.then(|| BatchNorm::zeros(3 * hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weight.nrows()
    }

    /// One recurrence step from an already computed input contribution
    /// `projected = x·W` (length `3H`, bias not included).
    pub fn step(
        &self,
        projected: ArrayView1<f64>,
        h_prev: ArrayView1<f64>,
        convention: GruConvention,
    ) -> (Array1<f64>, StepCache) {
        let hd = self.hidden();
        let u = &self.recurrent_weight;
        let zr_rec = h_prev.dot(&u.slice(s![.., ..2 * hd]));
        let mut z = Array1::zeros(hd);
        let mut r = Array1::zeros(hd);
        for k in 0..hd {
            z[k] = sigmoid(projected[k] + zr_rec[k] + self.bias[k]);
            r[k] = sigmoid(projected[hd + k] + zr_rec[hd + k] + self.bias[hd + k]);
        }
        let reset_h = &r * &h_prev;
        let cand_rec = reset_h.dot(&u.slice(s![.., 2 * hd..]));
        let candidate = Array1::from_shape_fn(hd, |k| {
            (projected[2 * hd + k] + cand_rec[k] + self.bias[2 * hd + k]).tanh()
        });
        let h = match convention {
            GruConvention::UpdateSelectsCandidate => {
                Array1::from_shape_fn(hd, |k| (1.0 - z[k]) * h_prev[k] + z[k] * candidate[k])
            }
            GruConvention::UpdateSelectsPrevious => {
                Array1::from_shape_fn(hd, |k| z[k] * h_prev[k] + (1.0 - z[k]) * candidate[k])
            }
        };
        let cache = StepCache {
            h_prev: h_prev.to_owned(),
            z,
            r,
            candidate,
        };
        (h, cache)
    }

    /// Backward of [`GruDirection::step`]. Returns `(d projected, d h_prev)`
    /// and accumulates recurrent-weight and bias gradients into `grads`.
    pub fn step_backward(
        &self,
        dh: ArrayView1<f64>,
        cache: &StepCache,
        convention: GruConvention,
        grads: &mut GruDirection,
    ) -> (Array1<f64>, Array1<f64>) {
        let hd = self.hidden();
        let StepCache {
            h_prev,
            z,
            r,
            candidate,
        } = cache;
        let mut dpre = Array1::zeros(3 * hd);
        let mut dh_prev = Array1::zeros(hd);
        for k in 0..hd {
            let (dz, dcand, dprev) = match convention {
                GruConvention::UpdateSelectsCandidate => (
                    dh[k] * (candidate[k] - h_prev[k]),
                    dh[k] * z[k],
                    dh[k] * (1.0 - z[k]),
                ),
                GruConvention::UpdateSelectsPrevious => (
                    dh[k] * (h_prev[k] - candidate[k]),
                    dh[k] * (1.0 - z[k]),
                    dh[k] * z[k],
                ),
            };
            dpre[k] = dz * z[k] * (1.0 - z[k]);
            dpre[2 * hd + k] = dcand * (1.0 - candidate[k] * candidate[k]);
            dh_prev[k] = dprev;
        }
        let u = &self.recurrent_weight;
        let dcand_pre = dpre.slice(s![2 * hd..]);
        // candidate pre-activation depends on (r ⊙ h_prev)·Uh
        let d_reset_h = u.slice(s![.., 2 * hd..]).dot(&dcand_pre);
        let reset_h = r * h_prev;
        outer_add(grads.recurrent_weight.slice_mut(s![.., 2 * hd..]), reset_h.view(), dcand_pre);
        for k in 0..hd {
            let dr = d_reset_h[k] * h_prev[k];
            dh_prev[k] += d_reset_h[k] * r[k];
            dpre[hd + k] = dr * r[k] * (1.0 - r[k]);
        }
        let dzr = dpre.slice(s![..2 * hd]);
        outer_add(grads.recurrent_weight.slice_mut(s![.., ..2 * hd]), h_prev.view(), dzr);
        dh_prev += &u.slice(s![.., ..2 * hd]).dot(&dzr);
        grads.bias += &dpre;
        (dpre, dh_prev)
    }

    /// Runs the recurrence over a whole sequence of input contributions
    /// `(T, 3H)` from a zero initial state. Outputs are in natural time order
    /// regardless of direction.
    pub fn run(
        &self,
        projected: ArrayView2<f64>,
        reverse: bool,
        convention: GruConvention,
    ) -> (Array2<f64>, Vec<StepCache>) {
        let steps = projected.nrows();
        let hd = self.hidden();
        let mut out = Array2::zeros((steps, hd));
        let mut caches = Vec::with_capacity(steps);
        let mut h = Array1::zeros(hd);
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            let (next, cache) = self.step(projected.row(t), h.view(), convention);
            out.row_mut(t).assign(&next);
            caches.push(cache);
            h = next;
        }
        (out, caches)
    }

    /// Backpropagation through time for [`GruDirection::run`]; `dout` is in
    /// natural time order. Returns `d projected` of shape `(T, 3H)`.
    pub fn run_backward(
        &self,
        dout: ArrayView2<f64>,
        caches: &[StepCache],
        reverse: bool,
        convention: GruConvention,
        grads: &mut GruDirection,
    ) -> Array2<f64> {
        let steps = dout.nrows();
        let hd = self.hidden();
        let mut dprojected = Array2::zeros((steps, 3 * hd));
        let mut carry = Array1::zeros(hd);
        for i in (0..steps).rev() {
            let t = if reverse { steps - 1 - i } else { i };
            let dh = &dout.row(t) + &carry;
            let (dpre, dprev) = self.step_backward(dh.view(), &caches[i], convention, grads);
            dprojected.row_mut(t).assign(&dpre);
            carry = dprev;
        }
        dprojected
    }
}

fn outer_add(mut target: ndarray::ArrayViewMut2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (i, &l) in left.iter().enumerate() {
        if l != 0.0 {
            target.row_mut(i).scaled_add(l, &right);
        }
    }
}

/// Single GRU step on a raw input vector, without batch norm.
pub fn gru_cell_step(
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    params: &GruDirection,
    convention: GruConvention,
) -> Array1<f64> {
    let projected = x.dot(&params.input_weight);
    params.step(projected.view(), h_prev, convention).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGru {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

/// Per-direction activations of a bidirectional layer for a batch.
#[derive(Debug, Clone)]
pub struct DirectionCache {
    bn: Option<BnCache>,
    steps: Vec<Vec<StepCache>>,
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    inputs: Vec<Array2<f64>>,
    directions: [DirectionCache; 2],
    pub(crate) stats: [Option<BnStats>; 2],
}

/// Settings shared by every bidirectional layer of a model.
#[derive(Debug, Clone, Copy)]
pub struct BiGruOptions {
    pub convention: GruConvention,
    pub merge: DirectionMerge,
    pub bn_epsilon: f64,
}

fn split_rows(stacked: Array2<f64>, lengths: &[usize]) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &len in lengths {
        out.push(stacked.slice(s![start..start + len, ..]).to_owned());
        start += len;
    }
    out
}

fn stack_rows(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("consistent widths")
}

impl BiGru {
    pub fn directions(&self) -> [&GruDirection; 2] {
        [&self.forward, &self.backward]
    }

    /// Forward over a batch of sequences. `training` selects batch
    /// statistics for the input-side batch norm.
    pub fn forward(
        &self,
        inputs: &[Array2<f64>],
        training: bool,
        opts: BiGruOptions,
    ) -> (Vec<Array2<f64>>, BiGruCache) {
        let lengths: Vec<usize> = inputs.iter().map(|x| x.nrows()).collect();
        let mut outputs: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut dir_caches = Vec::with_capacity(2);
        let mut stats = [None, None];
        for (d, dir) in self.directions().into_iter().enumerate() {
            let projected: Vec<Array2<f64>> = inputs.iter().map(|x| x.dot(&dir.input_weight)).collect();
            let (projected, bn_cache) = match &dir.bn {
                None => (projected, None),
                Some(bn) => {
                    let stacked = stack_rows(&projected);
                    if training {
                        let (y, cache, st) = bn.forward_train(stacked.view(), opts.bn_epsilon);
                        stats[d] = Some(st);
                        (split_rows(y, &lengths), Some(cache))
                    } else {
                        (split_rows(bn.forward_eval(stacked.view(), opts.bn_epsilon), &lengths), None)
                    }
                }
            };
            let mut steps = Vec::with_capacity(inputs.len());
            for p in &projected {
                let (h, cache) = dir.run(p.view(), d == 1, opts.convention);
                outputs[d].push(h);
                steps.push(cache);
            }
            dir_caches.push(DirectionCache { bn: bn_cache, steps });
        }
        let [fwd, bwd] = outputs;
        let merged = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| match opts.merge {
                DirectionMerge::Sum => f + b,
                DirectionMerge::Concat => ndarray::concatenate(Axis(1), &[f.view(), b.view()]).unwrap(),
            })
            .collect();
        let mut it = dir_caches.into_iter();
        let cache = BiGruCache {
            inputs: inputs.to_vec(),
            directions: [it.next().unwrap(), it.next().unwrap()],
            stats,
        };
        (merged, cache)
    }

    /// Backward over a batch; returns input gradients and accumulates into `grads`.
    pub fn backward(
        &self,
        douts: &[Array2<f64>],
        cache: &BiGruCache,
        opts: BiGruOptions,
        grads: &mut BiGru,
    ) -> Vec<Array2<f64>> {
        let hd = self.forward.hidden();
        let lengths: Vec<usize> = cache.inputs.iter().map(|x| x.nrows()).collect();
        let mut dinputs: Vec<Array2<f64>> = cache
            .inputs
            .iter()
            .map(|x| Array2::zeros(x.raw_dim()))
            .collect();
        let grad_dirs = [&mut grads.forward, &mut grads.backward];
        for (d, (dir, gdir)) in self.directions().into_iter().zip(grad_dirs).enumerate() {
            let dc = &cache.directions[d];
            let mut dprojected = Vec::with_capacity(douts.len());
            for (i, dout) in douts.iter().enumerate() {
                let dh = match opts.merge {
                    DirectionMerge::Sum => dout.view(),
                    DirectionMerge::Concat => dout.slice(s![.., d * hd..(d + 1) * hd]),
                };
                dprojected.push(dir.run_backward(dh, &dc.steps[i], d == 1, opts.convention, gdir));
            }
            let dprojected = match (&dir.bn, &dc.bn) {
                (Some(bn), Some(bn_cache)) => {
                    let stacked = stack_rows(&dprojected);
                    let gbn = gdir.bn.as_mut().expect("grads mirror params");
                    split_rows(bn.backward(stacked.view(), bn_cache, gbn), &lengths)
                }
                _ => dprojected,
            };
            for ((x, dp), dx) in cache.inputs.iter().zip(&dprojected).zip(dinputs.iter_mut()) {
                gdir.input_weight += &x.t().dot(dp);
                *dx += &dp.dot(&dir.input_weight.t());
            }
        }
        dinputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_direction(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruDirection {
        GruDirection {
            input_weight: Array2::from_shape_fn((input, 3 * hidden), |_| rng.gen_range(-0.8..0.8)),
            recurrent_weight: Array2::from_shape_fn((hidden, 3 * hidden), |_| rng.gen_range(-0.8..0.8)),
            bias: Array1::from_shape_fn(3 * hidden, |_| rng.gen_range(-0.5..0.5)),
            bn: None,
        }
    }

    /// Scalar re-implementation of the four gate equations on the
    /// concatenated `[h, x]` vector with explicit per-gate matrices.
    fn scalar_step(x: &[f64], h: &[f64], p: &GruDirection) -> Vec<f64> {
        let hd = h.len();
        let gate = |g: usize, k: usize, hvec: &[f64]| {
            let mut acc = p.bias[g * hd + k];
            for (j, hv) in hvec.iter().enumerate() {
                acc += p.recurrent_weight[[j, g * hd + k]] * hv;
            }
            for (j, xv) in x.iter().enumerate() {
                acc += p.input_weight[[j, g * hd + k]] * xv;
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = (0..hd).map(|k| sig(gate(0, k, h))).collect();
        let r: Vec<f64> = (0..hd).map(|k| sig(gate(1, k, h))).collect();
        let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
        let cand: Vec<f64> = (0..hd).map(|k| gate(2, k, &rh).tanh()).collect();
        (0..hd).map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k]).collect()
    }

    #[test]
    fn zero_params_halve_state() {
        let p = GruDirection::zeros(3, 4, false);
        let h_prev = ndarray::arr1(&[1.0, -2.0, 0.5, 4.0]);
        let x = ndarray::arr1(&[0.3, 0.1, -0.7]);
        let h = gru_cell_step(x.view(), h_prev.view(), &p, GruConvention::default());
        assert_eq!(h, h_prev.mapv(|v| 0.5 * v));
        let zero = gru_cell_step(Array1::zeros(3).view(), Array1::zeros(4).view(), &p, GruConvention::default());
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let p = random_direction(&mut rng, 3, 5);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = gru_cell_step(
                ndarray::aview1(&x),
                ndarray::aview1(&h),
                &p,
                GruConvention::default(),
            );
            for (a, b) in got.iter().zip(scalar_step(&x, &h, &p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn opts() -> BiGruOptions {
        BiGruOptions {
            convention: GruConvention::default(),
            merge: DirectionMerge::Sum,
            bn_epsilon: 1e-5,
        }
    }

    #[test]
    fn length_one_sequence_sums_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = BiGru {
            forward: random_direction(&mut rng, 3, 4),
            backward: random_direction(&mut rng, 3, 4),
        };
        let x = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0));
        let (out, _) = layer.forward(&[x.clone()], false, opts());
        let h0 = Array1::zeros(4);
        let expected = gru_cell_step(x.row(0), h0.view(), &layer.forward, GruConvention::default())
            + gru_cell_step(x.row(0), h0.view(), &layer.backward, GruConvention::default());
        for (a, b) in out[0].row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for hidden in [1, 3, 6] {
            let layer = BiGru {
                forward: random_direction(&mut rng, 4, hidden),
                backward: random_direction(&mut rng, 4, hidden),
            };
            let swapped = BiGru {
                forward: layer.backward.clone(),
                backward: layer.forward.clone(),
            };
            let x = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-1.0..1.0));
            let reversed = x.slice(s![..;-1, ..]).to_owned();
            let (a, _) = layer.forward(&[x], false, opts());
            let (b, _) = swapped.forward(&[reversed], false, opts());
            let b_back = b[0].slice(s![..;-1, ..]).to_owned();
            for (u, v) in a[0].iter().zip(b_back.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layer_outputs_zero() {
        let layer = BiGru {
            forward: GruDirection::zeros(3, 4, false),
            backward: GruDirection::zeros(3, 4, false),
        };
        let x = Array2::from_elem((5, 3), 2.5);
        let (out, _) = layer.forward(&[x], false, opts());
        assert!(out[0].iter().all(|&v| v == 0.0));
    }
}
