//! Mini-batch CTC training: padding, per-item loss and gradients, Adam,
//! duration-bucketed seeded batching and per-epoch validation.

use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_labels, Alphabet, CodecError};
use crate::ctc::{ctc_grad, ctc_loss, min_frames, CtcError};
use crate::decoder::greedy_labels;
use crate::metrics::{error_report, CorpusTotals, MetricsError};
use crate::network::{model_backward, model_forward, Mode, ModelConfig, ModelParams, NetworkError, ParamGrads};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("utterance {utterance} has {found} bins, expected {expected}")]
    InconsistentBins {
        utterance: String,
        expected: usize,
        found: usize,
    },
    #[error("utterance {utterance}: {labels} labels cannot fit in {frames} encoder frames")]
    NoValidAlignment {
        utterance: String,
        labels: usize,
        frames: usize,
    },
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("parameter and gradient tensors differ: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A featurized utterance with its target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Normalized spectrogram, `(frames, bins)`.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Sentinel in padded label rows.
pub const LABEL_PAD: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(batch, max frames, bins)`, zero-padded.
    pub features: Array3<f64>,
    pub frame_lengths: Vec<usize>,
    /// Encoder output frames per item.
    pub output_lengths: Vec<usize>,
    /// `(batch, max labels)`, padded with [`LABEL_PAD`].
    pub labels: Array2<usize>,
    pub label_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Item `i` cut to its true length.
    pub fn item_features(&self, i: usize) -> ArrayView2<'_, f64> {
        self.features.slice(s![i, ..self.frame_lengths[i], ..])
    }

    pub fn item_labels(&self, i: usize) -> Vec<usize> {
        self.labels.row(i).iter().take(self.label_lengths[i]).copied().collect()
    }

    fn item_views(&self) -> Vec<ArrayView2<'_, f64>> {
        (0..self.len()).map(|i| self.item_features(i)).collect()
    }
}

pub fn pad_batch(items: &[&Utterance], config: &ModelConfig) -> Result<Batch, TrainError> {
    let first = items.first().ok_or(TrainError::EmptyBatch)?;
    let bins = first.features.ncols();
    if let Some(bad) = items.iter().find(|u| u.features.ncols() != bins) {
        return Err(TrainError::InconsistentBins {
            utterance: bad.id.clone(),
            expected: bins,
            found: bad.features.ncols(),
        });
    }
    let max_t = items.iter().map(|u| u.features.nrows()).max().unwrap_or(0);
    let max_l = items.iter().map(|u| u.labels.len()).max().unwrap_or(0);
    let mut features = Array3::zeros((items.len(), max_t, bins));
    let mut labels = Array2::from_elem((items.len(), max_l), LABEL_PAD);
    for (i, u) in items.iter().enumerate() {
        features.slice_mut(s![i, ..u.features.nrows(), ..]).assign(&u.features);
        for (j, &l) in u.labels.iter().enumerate() {
            labels[[i, j]] = l;
        }
    }
    let frame_lengths: Vec<usize> = items.iter().map(|u| u.features.nrows()).collect();
    Ok(Batch {
        ids: items.iter().map(|u| u.id.clone()).collect(),
        output_lengths: frame_lengths.iter().map(|&t| config.output_frames(t)).collect(),
        frame_lengths,
        features,
        labels,
        label_lengths: items.iter().map(|u| u.labels.len()).collect(),
    })
}

/// How per-item losses combine into the optimized scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over batch items.
    #[default]
    Mean,
    /// Sum over items divided by the total number of encoder frames.
    PerFrame,
}

fn reduction_weights(batch: &Batch, reduction: LossReduction) -> f64 {
    match reduction {
        LossReduction::Mean => 1.0 / batch.len() as f64,
        LossReduction::PerFrame => 1.0 / batch.output_lengths.iter().sum::<usize>().max(1) as f64,
    }
}

fn check_alignable(batch: &Batch, i: usize) -> Result<(), TrainError> {
    let labels = batch.item_labels(i);
    if min_frames(&labels) > batch.output_lengths[i] {
        return Err(TrainError::NoValidAlignment {
            utterance: batch.ids[i].clone(),
            labels: labels.len(),
            frames: batch.output_lengths[i],
        });
    }
    Ok(())
}

/// Per-item CTC losses under `mode`, each computed at the item's true length.
pub fn batch_losses(params: &ModelParams, batch: &Batch, mode: Mode) -> Result<Vec<f64>, TrainError> {
    let out = model_forward(params, &batch.item_views(), mode)?;
    out.posteriors()
        .iter()
        .enumerate()
        .map(|(i, post)| Ok(ctc_loss(post.log_probs().view(), &batch.item_labels(i))?))
        .collect()
}

pub struct StepOutput {
    pub losses: Vec<f64>,
    /// The reduced loss whose gradient `grads` is.
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Training-mode forward and backward over one batch. Batch-norm running
/// statistics in `params` are updated from the batch.
pub fn train_step_gradients(
    params: &mut ModelParams,
    batch: &Batch,
    dropout_seed: u64,
    reduction: LossReduction,
) -> Result<StepOutput, TrainError> {
    for i in 0..batch.len() {
        check_alignable(batch, i)?;
    }
    let out = model_forward(params, &batch.item_views(), Mode::Train { dropout_seed })?;
    let weight = reduction_weights(batch, reduction);
    let mut losses = Vec::with_capacity(batch.len());
    let mut dlogits = Vec::with_capacity(batch.len());
    for (i, logits) in out.logits.iter().enumerate() {
        let r = ctc_grad(logits.view(), &batch.item_labels(i))?;
        losses.push(r.loss);
        dlogits.push(r.grad.expect("ctc_grad returns a gradient") * weight);
    }
    let grads = model_backward(params, &out, &dlogits)?;
    params.update_running_stats(&out);
    Ok(StepOutput {
        loss: losses.iter().sum::<f64>() * weight,
        losses,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of the trainable tensors.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState) -> Result<(), TrainError> {
    let grad_tensors = grads.tensors();
    let mut targets = params.tensors_mut();
    if grad_tensors.len() != targets.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} gradient tensors for {} parameters",
            grad_tensors.len(),
            targets.len()
        )));
    }
    for (p, g) in targets.iter().zip(&grad_tensors) {
        if p.name != g.name || p.view.shape() != g.view.shape() {
            return Err(TrainError::ShapeMismatch(format!("{} vs {}", p.name, g.name)));
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((p, g), (mut m, mut v)) in targets.iter_mut().zip(&grad_tensors).zip(moments) {
        if !p.trainable {
            continue;
        }
        ndarray::Zip::from(&mut p.view)
            .and(&g.view)
            .and(&mut m.view)
            .and(&mut v.view)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            });
    }
    Ok(())
}

/// `[train]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    /// Rescale gradients whose norm exceeds this. Off when absent.
    pub clip_norm: Option<f64>,
    /// Stop once validation CER is at or below this. Off when absent.
    pub target_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            loss_reduction: LossReduction::Mean,
            clip_norm: None,
            target_cer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cer: Option<f64>,
    pub val_wer: Option<f64>,
    pub wall_time_secs: f64,
    pub seed: u64,
    /// Seed of this epoch's shuffle and dropout stream.
    pub epoch_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub final_params: ModelParams,
    pub log: TrainLog,
}

/// Pooled greedy-decoding WER and CER of `params` over `utterances`.
pub fn evaluate(params: &ModelParams, utterances: &[Utterance], alphabet: &Alphabet) -> Result<CorpusTotals, TrainError> {
    let mut totals = CorpusTotals::default();
    for u in utterances {
        let out = model_forward(params, &[u.features.view()], Mode::Eval)?;
        let hyp = decode_labels(&greedy_labels(&out.posteriors()[0]), alphabet)?;
        let reference = decode_labels(&u.labels, alphabet)?;
        totals.add(&error_report(&reference, &hyp)?);
    }
    Ok(totals)
}

/// Batches for one epoch: indices are shuffled, grouped into duration
/// buckets of roughly four batches each, chunked, and the batch order
/// shuffled again.
pub fn epoch_batches(frames: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let n = frames.len();
    let mut by_length: Vec<usize> = (0..n).collect();
    by_length.sort_by_key(|&i| (frames[i], i));
    let buckets = n.div_ceil(4 * batch_size).max(1);
    let mut bucket_of = vec![0; n];
    for (rank, &i) in by_length.iter().enumerate() {
        bucket_of[i] = rank * buckets / n;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| bucket_of[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains from `init`. `on_epoch` sees every log record together with the
/// parameters at the end of that epoch.
pub fn train(
    init: ModelParams,
    train_set: &[Utterance],
    val_set: &[Utterance],
    alphabet: &Alphabet,
    config: &TrainConfig,
    config_hash: &str,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let model_cfg = init.config.clone();
    for u in train_set.iter().chain(val_set) {
        let frames = model_cfg.output_frames(u.features.nrows());
        if min_frames(&u.labels) > frames {
            return Err(TrainError::NoValidAlignment {
                utterance: u.id.clone(),
                labels: u.labels.len(),
                frames,
            });
        }
    }
    let frames: Vec<usize> = train_set.iter().map(|u| u.features.nrows()).collect();
    let mut params = init;
    let mut adam = AdamState::new(&params, config.adam);
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let epoch_seed: u64 = seeds.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut loss_sum = 0.0;
        let mut items = 0usize;
        for (b, indices) in epoch_batches(&frames, config.batch_size, &mut rng).into_iter().enumerate() {
            let members: Vec<&Utterance> = indices.iter().map(|&i| &train_set[i]).collect();
            let batch = pad_batch(&members, &model_cfg)?;
            let mut step = train_step_gradients(&mut params, &batch, rng.gen(), config.loss_reduction)?;
            if !step.loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, batch: b });
            }
            if let Some(max) = config.clip_norm {
                let norm = step.grads.trainable_norm();
                if norm > max {
                    let grads = step.grads.clone();
                    step.grads.add_scaled(&grads, max / norm - 1.0);
                }
            }
            adam_step(&mut params, &step.grads, &mut adam)?;
            if !params.all_finite() {
                return Err(TrainError::DivergedLoss { epoch, batch: b });
            }
            loss_sum += step.losses.iter().sum::<f64>();
            items += batch.len();
        }

        let (val_cer, val_wer) = if val_set.is_empty() {
            (None, None)
        } else {
            let totals = evaluate(&params, val_set, alphabet)?;
            (Some(totals.cer()), Some(totals.wer()))
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / items as f64,
            val_cer,
            val_wer,
            wall_time_secs: started.elapsed().as_secs_f64(),
            seed: config.seed,
            epoch_seed,
            config_hash: config_hash.to_owned(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val cer {:?} ({:.1}s)",
            record.train_loss,
            record.val_cer,
            record.wall_time_secs
        );
        let score = val_cer.unwrap_or(record.train_loss);
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, epoch, params.clone()));
        }
        on_epoch(&record, &params);
        log.records.push(record);
        if let (Some(target), Some(cer)) = (config.target_cer, val_cer) {
            if cer <= target {
                break;
            }
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        final_params: params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ConvSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_bins: 6,
            conv_layers: vec![ConvSpec {
                kernel: [3, 3],
                stride: [2, 2],
                filters: 2,
            }],
            num_gru_layers: 1,
            gru_units: 4,
            dropout_rate: 0.0,
            dense_units: 5,
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn utterance(id: &str, frames: usize, labels: Vec<usize>, seed: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Utterance {
            id: id.into(),
            features: Array2::from_shape_simple_fn((frames, 6), || rng.gen_range(-1.0..1.0)),
            labels,
        }
    }

    #[test]
    fn padding_shapes() {
        let cfg = tiny_config();
        let a = utterance("a", 10, vec![0], 1);
        let b = utterance("b", 20, vec![1, 2], 2);
        let single = pad_batch(&[&a], &cfg).unwrap();
        assert_eq!(single.features.dim(), (1, 10, 6));
        assert_eq!(single.item_features(0), a.features.view());
        let batch = pad_batch(&[&a, &b], &cfg).unwrap();
        assert_eq!(batch.features.dim(), (2, 20, 6));
        assert_eq!(batch.frame_lengths, vec![10, 20]);
        assert_eq!(batch.output_lengths, vec![5, 10]);
        assert_eq!(batch.item_labels(0), vec![0]);
        assert!(batch.features.slice(s![0, 10.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_bins() {
        let a = utterance("a", 4, vec![0], 1);
        let mut b = utterance("b", 4, vec![0], 2);
        b.features = Array2::zeros((4, 7));
        assert!(matches!(
            pad_batch(&[&a, &b], &tiny_config()),
            Err(TrainError::InconsistentBins { utterance, .. }) if utterance == "b"
        ));
        assert!(matches!(pad_batch(&[], &tiny_config()), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn adam_zero_gradient_is_a_fixpoint() {
        let mut p = init_model(&tiny_config(), 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &before.zeros_like(), &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let p0 = init_model(&tiny_config(), 1).unwrap();
        let mut g = p0.zeros_like();
        for mut t in g.tensors_mut() {
            t.view.fill(1.0);
        }
        let mut g1000 = g.zeros_like();
        g1000.add_scaled(&g, 1000.0);
        let mut a = p0.clone();
        let mut b = p0.clone();
        adam_step(&mut a, &g, &mut AdamState::new(&p0, AdamConfig::default())).unwrap();
        adam_step(&mut b, &g1000, &mut AdamState::new(&p0, AdamConfig::default())).unwrap();
        let (da, db) = (&a.dense.bias - &p0.dense.bias, &b.dense.bias - &p0.dense.bias);
        for (x, y) in da.iter().zip(&db) {
            assert!((x + 1e-4).abs() < 1e-11, "{x}");
            assert!((x - y).abs() < 1e-11);
        }
        // running statistics are not trainable
        assert_eq!(a.conv[0].bn.running_var, p0.conv[0].bn.running_var);
    }

    #[test]
    fn adam_rejects_foreign_gradients() {
        let mut p = init_model(&tiny_config(), 1).unwrap();
        let other = ModelConfig {
            dense_units: 7,
            ..tiny_config()
        };
        let g = ModelParams::zeros(&other).unwrap();
        let mut state = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &g, &mut state), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn batched_eval_losses_match_solo_losses() {
        let p = init_model(&tiny_config(), 3).unwrap();
        let items = [
            utterance("a", 9, vec![0, 1], 1),
            utterance("b", 14, vec![2], 2),
            utterance("c", 5, vec![], 3),
        ];
        let refs: Vec<&Utterance> = items.iter().collect();
        let batch = pad_batch(&refs, &p.config).unwrap();
        let batched = batch_losses(&p, &batch, Mode::Eval).unwrap();
        for (u, l) in items.iter().zip(&batched) {
            let solo = batch_losses(&p, &pad_batch(&[u], &p.config).unwrap(), Mode::Eval).unwrap();
            assert!((solo[0] - l).abs() <= 1e-9);
        }
    }

    #[test]
    fn unalignable_utterance_is_named() {
        let p = init_model(&tiny_config(), 3).unwrap();
        let good = utterance("good", 8, vec![0], 1);
        let bad = utterance("too-long", 4, vec![0, 1, 2], 2);
        let err = train(
            p,
            &[good, bad],
            &[],
            &Alphabet::from_symbols(vec!['a', 'b', 'c']).unwrap(),
            &TrainConfig::default(),
            "h",
            |_, _| {},
        )
        .err()
        .unwrap();
        assert!(matches!(err, TrainError::NoValidAlignment { ref utterance, .. } if utterance == "too-long"));
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let alphabet = Alphabet::from_symbols(vec!['a', 'b', 'c']).unwrap();
        let data: Vec<Utterance> = (0..4)
            .map(|i| utterance(&format!("u{i}"), 12 + i, vec![i % 3, (i + 1) % 3], i as u64))
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let p = init_model(&tiny_config(), 5).unwrap();
            train(p, &data, &data, &alphabet, &cfg, "h", |_, _| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log.losses(), b.log.losses());
        assert_eq!(a.final_params, b.final_params);
        let losses = a.log.losses();
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses[2] < losses[0]);
        assert_eq!(a.log.records[0].config_hash, "h");
    }

    #[test]
    fn epoch_batches_partition_the_indices() {
        let frames: Vec<usize> = (0..37).map(|i| (i * 7919) % 101).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&frames, 4, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 4));
    }
}
