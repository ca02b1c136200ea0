//! The acoustic encoder: convolution blocks (conv, batch norm, ReLU),
//! bidirectional GRU layers with dropout, a dense ReLU layer and a softmax
//! output over the alphabet plus blank. Forward and backward passes are
//! written out by hand in `f64`.

pub mod batchnorm;
pub mod conv;
pub mod gru;
pub mod layers;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use batchnorm::{BatchNorm, BnCache, BnStats};
use conv::{kernel_matrix, ConvGeometry};
use gru::{BiGru, BiGruCache, BiGruOptions, DirectionMerge, GruConvention, GruDirection};
use layers::Linear;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward pass needs the activations of a training-mode forward")]
    MissingCache,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    /// `(time, freq)`
    pub kernel: [usize; 2],
    /// `(time, freq)`
    pub stride: [usize; 2],
    pub filters: usize,
}

/// Architecture hyperparameters (`[model]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub num_gru_layers: usize,
    pub gru_units: usize,
    pub dropout_rate: f64,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dense_relu: bool,
    pub direction_merge: DirectionMerge,
    pub gru_convention: GruConvention,
    pub recurrent_batch_norm: bool,
    pub bn_epsilon: f64,
    /// Weight of the newest batch in the running-statistics average.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_bins: 401,
            conv_layers: vec![
                ConvSpec {
                    kernel: [11, 41],
                    stride: [2, 2],
                    filters: 32,
                },
                ConvSpec {
                    kernel: [11, 21],
                    stride: [1, 2],
                    filters: 32,
                },
            ],
            num_gru_layers: 5,
            gru_units: 512,
            dropout_rate: 0.5,
            dense_units: 1024,
            num_classes: crate::codec::NUM_CLASSES,
            dense_relu: true,
            direction_merge: DirectionMerge::Sum,
            gru_convention: GruConvention::UpdateSelectsCandidate,
            recurrent_batch_norm: true,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::InvalidConfig(msg));
        if self.input_bins == 0 {
            return bad("input_bins must be positive".into());
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.kernel.contains(&0) || c.stride.contains(&0) || c.filters == 0 {
                return bad(format!("conv layer {i}: kernel, stride and filters must be >= 1"));
            }
        }
        if self.num_gru_layers > 0 && self.gru_units == 0 {
            return bad("gru_units must be positive".into());
        }
        if self.dense_units == 0 {
            return bad("dense_units must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Encoder output length for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.conv_layers
            .iter()
            .fold(frames, |t, c| t.div_ceil(c.stride[0]))
    }

    /// Frequency bins after the conv stack.
    pub fn conv_output_bins(&self) -> usize {
        self.conv_layers
            .iter()
            .fold(self.input_bins, |f, c| f.div_ceil(c.stride[1]))
    }

    pub fn conv_output_channels(&self) -> usize {
        self.conv_layers.last().map_or(1, |c| c.filters)
    }

    fn recurrent_input_dim(&self) -> usize {
        self.conv_output_bins() * self.conv_output_channels()
    }

    fn recurrent_output_dim(&self) -> usize {
        match self.direction_merge {
            DirectionMerge::Sum => self.gru_units,
            DirectionMerge::Concat => 2 * self.gru_units,
        }
    }

    fn dense_input_dim(&self) -> usize {
        if self.num_gru_layers == 0 {
            self.recurrent_input_dim()
        } else {
            self.recurrent_output_dim()
        }
    }

    fn bigru_options(&self) -> BiGruOptions {
        BiGruOptions {
            convention: self.gru_convention,
            merge: self.direction_merge,
            bn_epsilon: self.bn_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(kernel_time, kernel_freq, in_channels, filters)`
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
    pub bn: BatchNorm,
}

/// Every weight, bias and batch-norm statistic of the encoder.
///
/// The same type holds gradients (see [`ParamGrads`]); running statistics
/// have zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer>,
    pub gru: Vec<BiGru>,
    pub dense: Linear,
    pub output: Linear,
}

pub type ParamGrads = ModelParams;

/// One entry of [`ModelParams::tensors`].
pub struct NamedTensor<'a> {
    pub name: String,
    pub trainable: bool,
    pub view: ArrayViewD<'a, f64>,
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub trainable: bool,
    pub view: ArrayViewMutD<'a, f64>,
}

// Lists every tensor in a fixed order; shared by the shared and mutable visitors.
macro_rules! visit_tensors {
    ($params:expr, $push:ident, $view:ident, $($mutability:tt)?) => {{
        let params = $params;
        for (i, layer) in (& $($mutability)? params.conv).into_iter().enumerate() {
            $push(format!("conv{i}.kernel"), true, layer.kernel.$view().into_dyn());
            $push(format!("conv{i}.bias"), true, layer.bias.$view().into_dyn());
            visit_tensors!(@bn layer.bn, format!("conv{i}.bn"), $push, $view);
        }
        for (l, layer) in (& $($mutability)? params.gru).into_iter().enumerate() {
            for (dir_name, dir) in [("fwd", & $($mutability)? layer.forward), ("bwd", & $($mutability)? layer.backward)] {
                let prefix = format!("gru{l}.{dir_name}");
                $push(format!("{prefix}.input_weight"), true, dir.input_weight.$view().into_dyn());
                $push(format!("{prefix}.recurrent_weight"), true, dir.recurrent_weight.$view().into_dyn());
                $push(format!("{prefix}.bias"), true, dir.bias.$view().into_dyn());
                if let Some(bn) = & $($mutability)? dir.bn {
                    visit_tensors!(@bn bn, format!("{prefix}.bn"), $push, $view);
                }
            }
        }
        $push("dense.weight".to_string(), true, params.dense.weight.$view().into_dyn());
        $push("dense.bias".to_string(), true, params.dense.bias.$view().into_dyn());
        $push("output.weight".to_string(), true, params.output.weight.$view().into_dyn());
        $push("output.bias".to_string(), true, params.output.bias.$view().into_dyn());
    }};
    (@bn $bn:expr, $prefix:expr, $push:ident, $view:ident) => {{
        let prefix = $prefix;
        $push(format!("{prefix}.gamma"), true, $bn.gamma.$view().into_dyn());
        $push(format!("{prefix}.beta"), true, $bn.beta.$view().into_dyn());
        $push(format!("{prefix}.running_mean"), false, $bn.running_mean.$view().into_dyn());
        $push(format!("{prefix}.running_var"), false, $bn.running_var.$view().into_dyn());
    }};
}

fn collector<'o, V, T>(
    out: &'o mut Vec<T>,
    make: impl Fn(String, bool, V) -> T + 'o,
) -> impl FnMut(String, bool, V) + 'o {
    move |name, trainable, view| out.push(make(name, trainable, view))
}

impl ModelParams {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut channels = 1;
        for spec in &config.conv_layers {
            conv.push(ConvLayer {
                kernel: Array4::zeros((spec.kernel[0], spec.kernel[1], channels, spec.filters)),
                bias: Array1::zeros(spec.filters),
                bn: BatchNorm::zeros(spec.filters),
            });
            channels = spec.filters;
        }
        let mut gru = Vec::new();
        let mut input = config.recurrent_input_dim();
        for _ in 0..config.num_gru_layers {
            let dir = || GruDirection::zeros(input, config.gru_units, config.recurrent_batch_norm);
            gru.push(BiGru {
                forward: dir(),
                backward: dir(),
            });
            input = config.recurrent_output_dim();
        }
        Ok(Self {
            config: config.clone(),
            conv,
            gru,
            dense: Linear::zeros(config.dense_input_dim(), config.dense_units),
            output: Linear::zeros(config.dense_units, config.num_classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        let mut push = collector(&mut out, |name, trainable, view| NamedTensor {
            name,
            trainable,
            view,
        });
        visit_tensors!(self, push, view,);
        drop(push);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        let mut push = collector(&mut out, |name, trainable, view| NamedTensorMut {
            name,
            trainable,
            view,
        });
        visit_tensors!(self, push, view_mut, mut);
        drop(push);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.view.len())
            .sum()
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for mut t in self.tensors_mut() {
            t.view.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.view.iter().all(|v| v.is_finite()))
    }

    /// Folds the batch statistics of a training forward into the running
    /// averages used at inference.
    pub fn update_running_stats(&mut self, output: &ForwardOutput) {
        let Some(cache) = &output.cache else { return };
        let momentum = self.config.bn_momentum;
        for (layer, c) in self.conv.iter_mut().zip(&cache.conv) {
            layer.bn.update_running(&c.stats, momentum);
        }
        for (layer, c) in self.gru.iter_mut().zip(&cache.gru) {
            for (dir, stats) in [&mut layer.forward, &mut layer.backward].into_iter().zip(&c.stats) {
                if let (Some(bn), Some(stats)) = (dir.bn.as_mut(), stats) {
                    bn.update_running(stats, momentum);
                }
            }
        }
    }

    /// `self += scale * other`, over trainable tensors only.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (mut dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if dst.trainable {
                dst.view.scaled_add(scale, &src.view);
            }
        }
    }

    /// Euclidean norm over trainable tensors.
    pub fn trainable_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .flat_map(|t| t.view.iter().map(|v| v * v).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic fan-in scaled uniform initialization: weights drawn from
/// `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, biases zero, batch-norm scale
/// one and shift zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, NetworkError> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |a: ArrayViewMutD<'_, f64>, fan_in: usize| {
        let limit = (3.0 / fan_in.max(1) as f64).sqrt();
        let mut a = a;
        a.mapv_inplace(|_| rng.gen_range(-limit..limit));
    };
    for layer in &mut params.conv {
        let (kh, kw, cin, _) = layer.kernel.dim();
        fill(layer.kernel.view_mut().into_dyn(), kh * kw * cin);
        layer.bn = BatchNorm::new(layer.bias.len());
    }
    for layer in &mut params.gru {
        for dir in [&mut layer.forward, &mut layer.backward] {
            let fan_in = dir.input_weight.nrows();
            let hidden = dir.hidden();
            fill(dir.input_weight.view_mut().into_dyn(), fan_in);
            fill(dir.recurrent_weight.view_mut().into_dyn(), hidden);
            if let Some(bn) = dir.bn.as_mut() {
                *bn = BatchNorm::new(3 * hidden);
            }
        }
    }
    let fan_in = params.dense.weight.nrows();
    fill(params.dense.weight.view_mut().into_dyn(), fan_in);
    let fan_in = params.output.weight.nrows();
    fill(params.output.weight.view_mut().into_dyn(), fan_in);
    Ok(params)
}

/// Per-frame class probabilities, one row per encoder output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(Array2<f64>);

impl PosteriorMatrix {
    pub fn from_logits(logits: ArrayView2<f64>) -> Self {
        Self(layers::softmax(logits))
    }

    /// Wraps probabilities after checking each row is a distribution.
    pub fn from_probs(probs: Array2<f64>) -> Result<Self, NetworkError> {
        for (t, row) in probs.rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(NetworkError::ShapeMismatch(format!(
                    "row {t} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn log_probs(&self) -> Array2<f64> {
        self.0.mapv(f64::ln)
    }

    pub fn num_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone)]
struct ConvCache {
    geometry: Vec<ConvGeometry>,
    patches: Vec<Array2<f64>>,
    bn: BnCache,
    /// Post-ReLU rows, all items stacked.
    activations: Array2<f64>,
    stats: BnStats,
}

/// Activations saved by a training-mode forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    conv: Vec<ConvCache>,
    gru: Vec<BiGruCache>,
    dropout: Vec<Vec<Option<Array2<f64>>>>,
    dense_input: Vec<Array2<f64>>,
    dense_output: Vec<Array2<f64>>,
}

pub struct ForwardOutput {
    /// Output-layer pre-softmax activations, one matrix per batch item.
    pub logits: Vec<Array2<f64>>,
    pub(crate) cache: Option<ForwardCache>,
}

impl ForwardOutput {
    pub fn posteriors(&self) -> Vec<PosteriorMatrix> {
        self.logits
            .iter()
            .map(|l| PosteriorMatrix::from_logits(l.view()))
            .collect()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

fn stack_rows(parts: impl IntoIterator<Item = Array2<f64>>) -> Array2<f64> {
    let parts: Vec<_> = parts.into_iter().collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent widths")
}

/// Runs the encoder on a batch of normalized spectrograms `(frames, bins)`.
/// Items are processed at their own lengths; only batch-norm statistics in
/// training mode couple them.
pub fn model_forward(
    params: &ModelParams,
    inputs: &[ArrayView2<f64>],
    mode: Mode,
) -> Result<ForwardOutput, NetworkError> {
    let cfg = &params.config;
    if inputs.is_empty() {
        return Err(NetworkError::ShapeMismatch("empty batch".into()));
    }
    for (i, x) in inputs.iter().enumerate() {
        if x.ncols() != cfg.input_bins || x.nrows() == 0 {
            return Err(NetworkError::ShapeMismatch(format!(
                "item {i}: input {:?}, expected (T >= 1, {})",
                x.dim(),
                cfg.input_bins
            )));
        }
    }
    let training = matches!(mode, Mode::Train { .. });
    let mut rng = match mode {
        Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        Mode::Eval => None,
    };

    let mut maps: Vec<Array3<f64>> = inputs
        .iter()
        .map(|x| {
            let (t, f) = x.dim();
            x.to_owned().into_shape_with_order((t, f, 1)).unwrap()
        })
        .collect();
    let mut conv_caches = Vec::new();
    for (layer, spec) in params.conv.iter().zip(&cfg.conv_layers) {
        let kernel = kernel_matrix(layer.kernel.view());
        let geometry: Vec<ConvGeometry> = maps
            .iter()
            .map(|m| {
                let (t, f, c) = m.dim();
                ConvGeometry::new(t, f, c, (spec.kernel[0], spec.kernel[1]), (spec.stride[0], spec.stride[1]))
            })
            .collect();
        let patches: Vec<Array2<f64>> = maps
            .iter()
            .zip(&geometry)
            .map(|(m, g)| conv::im2col(m.view(), g))
            .collect();
        let pre = stack_rows(patches.iter().map(|p| p.dot(&kernel) + &layer.bias));
        let (normed, bn_cache) = if training {
            let (y, c, s) = layer.bn.forward_train(pre.view(), cfg.bn_epsilon);
            (y, Some((c, s)))
        } else {
            (layer.bn.forward_eval(pre.view(), cfg.bn_epsilon), None)
        };
        let activations = layers::relu(&normed);
        let mut start = 0;
        maps = geometry
            .iter()
            .map(|g| {
                let rows = g.out_time * g.out_freq;
                let block = activations.slice(ndarray::s![start..start + rows, ..]).to_owned();
                start += rows;
                block
                    .into_shape_with_order((g.out_time, g.out_freq, spec.filters))
                    .unwrap()
            })
            .collect();
        if let Some((bn, stats)) = bn_cache {
            conv_caches.push(ConvCache {
                geometry,
                patches,
                bn,
                activations,
                stats,
            });
        }
    }

    let mut seqs: Vec<Array2<f64>> = maps
        .into_iter()
        .map(|m| {
            let (t, f, c) = m.dim();
            m.into_shape_with_order((t, f * c)).unwrap()
        })
        .collect();
    let opts = cfg.bigru_options();
    let mut gru_caches = Vec::new();
    let mut dropout = Vec::new();
    for layer in &params.gru {
        let (mut outs, cache) = layer.forward(&seqs, training, opts);
        let mut masks = Vec::new();
        if let Some(rng) = rng.as_mut() {
            for out in outs.iter_mut() {
                if cfg.dropout_rate > 0.0 {
                    let mask = layers::dropout_mask(out.nrows(), out.ncols(), cfg.dropout_rate, rng);
                    *out *= &mask;
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
            }
            gru_caches.push(cache);
            dropout.push(masks);
        }
        seqs = outs;
    }

    let mut dense_output = Vec::with_capacity(seqs.len());
    let mut logits = Vec::with_capacity(seqs.len());
    for x in &seqs {
        let pre = params.dense.forward(x.view());
        let h = if cfg.dense_relu { layers::relu(&pre) } else { pre };
        logits.push(params.output.forward(h.view()));
        dense_output.push(h);
    }

    let cache = training.then(|| ForwardCache {
        conv: conv_caches,
        gru: gru_caches,
        dropout,
        dense_input: seqs,
        dense_output,
    });
    Ok(ForwardOutput { logits, cache })
}

/// Gradient of the loss with respect to every parameter, given `dL/dlogits`
/// for each batch item of a training-mode forward.
pub fn model_backward(
    params: &ModelParams,
    output: &ForwardOutput,
    dlogits: &[Array2<f64>],
) -> Result<ParamGrads, NetworkError> {
    let cache = output.cache.as_ref().ok_or(NetworkError::MissingCache)?;
    if dlogits.len() != output.logits.len()
        || dlogits.iter().zip(&output.logits).any(|(d, l)| d.dim() != l.dim())
    {
        return Err(NetworkError::ShapeMismatch(
            "upstream gradient does not match the logits".into(),
        ));
    }
    let cfg = &params.config;
    let mut grads = params.zeros_like();

    let mut dseqs: Vec<Array2<f64>> = Vec::with_capacity(dlogits.len());
    for ((d, h), x) in dlogits.iter().zip(&cache.dense_output).zip(&cache.dense_input) {
        let dh = params.output.backward(h.view(), d.view(), &mut grads.output);
        let dpre = if cfg.dense_relu {
            layers::relu_backward(&dh, h)
        } else {
            dh
        };
        dseqs.push(params.dense.backward(x.view(), dpre.view(), &mut grads.dense));
    }

    let opts = cfg.bigru_options();
    for (l, layer) in params.gru.iter().enumerate().rev() {
        for (d, mask) in dseqs.iter_mut().zip(&cache.dropout[l]) {
            if let Some(mask) = mask {
                *d *= mask;
            }
        }
        dseqs = layer.backward(&dseqs, &cache.gru[l], opts, &mut grads.gru[l]);
    }

    let last_geometry = cache.conv.last().map(|c| &c.geometry);
    let mut dmaps: Vec<Array3<f64>> = dseqs
        .into_iter()
        .enumerate()
        .map(|(i, d)| match last_geometry {
            Some(geometry) => {
                let g = &geometry[i];
                let c = d.ncols() / g.out_freq;
                d.into_shape_with_order((g.out_time, g.out_freq, c)).unwrap()
            }
            None => {
                let (t, f) = d.dim();
                d.into_shape_with_order((t, f, 1)).unwrap()
            }
        })
        .collect();

    for (i, (layer, spec)) in params.conv.iter().zip(&cfg.conv_layers).enumerate().rev() {
        let cc = &cache.conv[i];
        let drows = stack_rows(
            dmaps
                .drain(..)
                .map(|d| {
                    let (t, f, c) = d.dim();
                    d.into_shape_with_order((t * f, c)).unwrap()
                }),
        );
        let drelu = layers::relu_backward(&drows, &cc.activations);
        let dpre = layer.bn.backward(drelu.view(), &cc.bn, &mut grads.conv[i].bn);
        let gk = &mut grads.conv[i];
        let mut start = 0;
        let mut next = Vec::with_capacity(cc.geometry.len());
        let mut dkernel = Array2::zeros((cc.geometry[0].patch_len(), spec.filters));
        for (g, p) in cc.geometry.iter().zip(&cc.patches) {
            let rows = g.out_time * g.out_freq;
            let dz = dpre.slice(ndarray::s![start..start + rows, ..]);
            start += rows;
            let (dx, dk, db) = conv::matrix_backward(p, layer.kernel.view(), dz, g);
            dkernel += &dk;
            gk.bias += &db;
            next.push(dx);
        }
        let shape = gk.kernel.raw_dim();
        gk.kernel += &dkernel.into_shape_with_order(shape).unwrap();
        dmaps = next;
    }
    Ok(grads)
}

/// Eval-mode posteriors for one utterance.
pub fn infer(params: &ModelParams, features: ArrayView2<f64>) -> Result<PosteriorMatrix, NetworkError> {
    let out = model_forward(params, &[features], Mode::Eval)?;
    Ok(out.posteriors().remove(0))
}

/// Copies a tensor list into freshly allocated arrays, for snapshots.
pub fn snapshot(params: &ModelParams) -> Vec<(String, ArrayD<f64>)> {
    params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.view.to_owned()))
        .collect()
}
