//! Connectionist temporal classification: the negative log-probability of a
//! label sequence summed over every frame alignment that collapses to it,
//! and its gradient with respect to the pre-softmax logits.
//!
//! The blank is always the last class (`ncols - 1`). All recursions run in
//! log space.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::network::layers::log_softmax;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("label {position} is the blank class")]
    BlankInLabels { position: usize },
    #[error("label {label} at {position} is outside the {classes} output classes")]
    LabelOutOfRange {
        position: usize,
        label: usize,
        classes: usize,
    },
    #[error("posterior matrix has no frames")]
    EmptyPosterior,
    #[error("no alignment of {labels} labels fits in {frames} frames (needs {needed})")]
    NoValidAlignment {
        labels: usize,
        frames: usize,
        needed: usize,
    },
    #[error("brute-force enumeration of {paths} paths exceeds the cap of {cap}")]
    TooLarge { paths: u128, cap: u128 },
}

/// Loss and, when requested, `dL/dlogits`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcResult {
    pub loss: f64,
    pub grad: Option<Array2<f64>>,
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, log_add)
}

/// `[∅, l1, ∅, l2, …, ∅]`, length `2L + 1`.
pub fn extended_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Fewest frames any alignment of `labels` needs: one per label plus one
/// separating blank per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

fn check_inputs(frames: usize, classes: usize, labels: &[usize]) -> Result<usize, CtcError> {
    if frames == 0 {
        return Err(CtcError::EmptyPosterior);
    }
    let blank = classes - 1;
    for (position, &label) in labels.iter().enumerate() {
        if label == blank {
            return Err(CtcError::BlankInLabels { position });
        }
        if label > blank {
            return Err(CtcError::LabelOutOfRange {
                position,
                label,
                classes,
            });
        }
    }
    Ok(blank)
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]`: log-probability of all prefixes of
/// length `t + 1` ending in extended state `s`.
fn forward_variables(log_probs: ArrayView2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = log_probs[[0, blank]];
    if states > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: log-probability of all suffixes from
/// frame `t` (inclusive) given state `s` at `t`.
fn backward_variables(log_probs: ArrayView2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    beta[[frames - 1, states - 1]] = log_probs[[frames - 1, blank]];
    if states > 1 {
        beta[[frames - 1, states - 2]] = log_probs[[frames - 1, ext[states - 2]]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    beta
}

fn total_log_prob(alpha: &Array2<f64>) -> f64 {
    let (frames, states) = alpha.dim();
    let last = alpha[[frames - 1, states - 1]];
    if states > 1 {
        log_add(last, alpha[[frames - 1, states - 2]])
    } else {
        last
    }
}

/// `-log P(labels | X)` from per-frame log-posteriors. Returns `+∞` when
/// the labels cannot fit in the available frames.
pub fn ctc_loss(log_posteriors: ArrayView2<f64>, labels: &[usize]) -> Result<f64, CtcError> {
    let blank = check_inputs(log_posteriors.nrows(), log_posteriors.ncols(), labels)?;
    if min_frames(labels) > log_posteriors.nrows() {
        return Ok(f64::INFINITY);
    }
    let ext = extended_labels(labels, blank);
    let alpha = forward_variables(log_posteriors, &ext, blank);
    Ok(-total_log_prob(&alpha))
}

/// Loss and gradient with respect to the logits feeding a softmax:
/// `grad[t] = softmax(logits[t]) - occupancy[t]`, where `occupancy[t][k]`
/// is the posterior probability of emitting class `k` at frame `t`.
pub fn ctc_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Result<CtcResult, CtcError> {
    let frames = logits.nrows();
    let blank = check_inputs(frames, logits.ncols(), labels)?;
    let needed = min_frames(labels);
    if needed > frames {
        return Err(CtcError::NoValidAlignment {
            labels: labels.len(),
            frames,
            needed,
        });
    }
    let log_probs = log_softmax(logits);
    let ext = extended_labels(labels, blank);
    let alpha = forward_variables(log_probs.view(), &ext, blank);
    let beta = backward_variables(log_probs.view(), &ext, blank);
    let log_total = total_log_prob(&alpha);

    let mut grad = log_probs.mapv(f64::exp);
    let mut occupancy = vec![f64::NEG_INFINITY; logits.ncols()];
    for t in 0..frames {
        occupancy.fill(f64::NEG_INFINITY);
        for (s, &k) in ext.iter().enumerate() {
            // alpha and beta both include the emission at t
            let joint = alpha[[t, s]] + beta[[t, s]] - log_probs[[t, k]];
            occupancy[k] = log_add(occupancy[k], joint);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            if occ > f64::NEG_INFINITY {
                grad[[t, k]] -= (occ - log_total).exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_total,
        grad: Some(grad),
    })
}

/// Default cap on enumerated paths for [`ctc_loss_bruteforce`].
pub const BRUTEFORCE_PATH_CAP: u128 = 10_000_000;

/// Exact loss by enumerating every frame path over the classes that can
/// appear in a valid alignment (the label symbols and blank). Exponential;
/// intended as a test oracle.
pub fn ctc_loss_bruteforce(
    log_posteriors: ArrayView2<f64>,
    labels: &[usize],
    cap: u128,
) -> Result<f64, CtcError> {
    let frames = log_posteriors.nrows();
    let blank = check_inputs(frames, log_posteriors.ncols(), labels)?;
    let mut symbols: Vec<usize> = labels.to_vec();
    symbols.sort_unstable();
    symbols.dedup();
    symbols.push(blank);
    let k = symbols.len();
    let paths = (k as u128)
        .checked_pow(frames as u32)
        .unwrap_or(u128::MAX);
    if paths > cap {
        return Err(CtcError::TooLarge { paths, cap });
    }
    let mut digits = vec![0usize; frames];
    let mut path = vec![0usize; frames];
    let mut valid = Vec::new();
    loop {
        for (p, &d) in path.iter_mut().zip(&digits) {
            *p = symbols[d];
        }
        if collapse(&path, blank) == labels {
            valid.push(
                path.iter()
                    .enumerate()
                    .map(|(t, &c)| log_posteriors[[t, c]])
                    .sum::<f64>(),
            );
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(-log_sum(valid));
            }
            digits[i] += 1;
            if digits[i] < k {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn log(m: Array2<f64>) -> Array2<f64> {
        m.mapv(f64::ln)
    }

    #[test]
    fn single_frame_single_label() {
        // classes: a, blank
        let lp = log(arr2(&[[0.8, 0.2]]));
        let loss = ctc_loss(lp.view(), &[0]).unwrap();
        assert!((loss - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label_matches_enumeration() {
        let p: Array2<f64> = arr2(&[[0.7, 0.3], [0.4, 0.6]]);
        let (a1, b1, a2, b2) = (p[[0, 0]], p[[0, 1]], p[[1, 0]], p[[1, 1]]);
        let expected = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        let loss = ctc_loss(log(p).view(), &[0]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_separating_blank() {
        let lp = log(arr2(&[[0.5, 0.5], [0.5, 0.5]]));
        assert_eq!(ctc_loss(lp.view(), &[0, 0]).unwrap(), f64::INFINITY);
        assert!(matches!(
            ctc_grad(lp.view(), &[0, 0]),
            Err(CtcError::NoValidAlignment { needed: 3, .. })
        ));
        let lp3 = log(arr2(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]));
        assert!(ctc_loss(lp3.view(), &[0, 0]).unwrap().is_finite());
    }

    #[test]
    fn input_errors() {
        let lp = log(arr2(&[[0.5, 0.5]]));
        assert_eq!(
            ctc_loss(lp.view(), &[1]),
            Err(CtcError::BlankInLabels { position: 0 })
        );
        let empty = Array2::<f64>::zeros((0, 3));
        assert_eq!(ctc_loss(empty.view(), &[0]), Err(CtcError::EmptyPosterior));
        assert_eq!(
            ctc_loss_bruteforce(empty.view(), &[0], BRUTEFORCE_PATH_CAP),
            Err(CtcError::EmptyPosterior)
        );
        let long = Array2::<f64>::zeros((30, 4));
        assert!(matches!(
            ctc_loss_bruteforce(long.view(), &[0, 1, 2], 1000),
            Err(CtcError::TooLarge { .. })
        ));
    }

    #[test]
    fn single_frame_gradient_is_cross_entropy() {
        let logits = arr2(&[[0.3, -1.2, 2.0, 0.1]]);
        let r = ctc_grad(logits.view(), &[1]).unwrap();
        let p = crate::network::layers::softmax(logits.view());
        let g = r.grad.unwrap();
        for k in 0..4 {
            let expected = p[[0, k]] - if k == 1 { 1.0 } else { 0.0 };
            assert!((g[[0, k]] - expected).abs() < 1e-12);
        }
        assert!((r.loss + p[[0, 1]].ln()).abs() < 1e-12);
    }

    #[test]
    fn blank_frames_at_edges_are_absorbed() {
        let lp = log(arr2(&[[0.6, 0.1, 0.3], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]));
        let base = ctc_loss(lp.view(), &[0, 1]).unwrap();
        let mut padded = Array2::from_elem((5, 3), f64::NEG_INFINITY);
        padded[[0, 2]] = 0.0;
        padded[[4, 2]] = 0.0;
        padded.slice_mut(ndarray::s![1..4, ..]).assign(&lp);
        let loss = ctc_loss(padded.view(), &[0, 1]).unwrap();
        assert!((loss - base).abs() < 1e-12);
    }

    #[test]
    fn tiny_posteriors_stay_finite() {
        let mut p = Array2::from_elem((40, 4), 1e-30);
        for t in 0..40 {
            p[[t, 3]] = 1.0 - 3e-30;
        }
        let loss = ctc_loss(log(p.clone()).view(), &[0, 1, 2]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let r = ctc_grad(log(p).view(), &[0, 1, 2]).unwrap();
        assert!(r.grad.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(collapse(&[0, 2, 0], 2), vec![0, 0]);
        assert!(collapse(&[2, 2], 2).is_empty());
        assert_eq!(min_frames(&[0, 0, 1, 1, 1]), 8);
    }
    fn random_logits(rng: &mut impl rand::Rng, frames: usize, classes: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((frames, classes), || rng.gen_range(-2.0..2.0))
    }

    fn all_label_seqs(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for seq in &frontier {
                for s in 0..symbols {
                    let mut v: Vec<usize> = seq.clone();
                    v.push(s);
                    next.push(v);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn dynamic_program_matches_bruteforce_sweep() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // three symbols plus blank
        for frames in 1..=6 {
            let lp = log_softmax(random_logits(&mut rng, frames, 4).view());
            for labels in all_label_seqs(3, 3) {
                let dp = ctc_loss(lp.view(), &labels).unwrap();
                let bf = ctc_loss_bruteforce(lp.view(), &labels, BRUTEFORCE_PATH_CAP).unwrap();
                if dp.is_infinite() {
                    assert!(bf.is_infinite(), "{labels:?} T={frames}");
                } else {
                    assert!((dp - bf).abs() < 1e-9, "{labels:?} T={frames}: {dp} vs {bf}");
                }
            }
        }
    }

    #[test]
    fn label_sequence_probabilities_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for frames in 1..=5 {
            let lp = log_softmax(random_logits(&mut rng, frames, 3).view());
            let total: f64 = all_label_seqs(2, frames)
                .iter()
                .map(|l| (-ctc_loss(lp.view(), l).unwrap()).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "T={frames}: {total}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for labels in [vec![], vec![0], vec![1, 2], vec![2, 2], vec![0, 1]] {
            let logits = random_logits(&mut rng, 3, 4);
            let r = ctc_grad(logits.view(), &labels).unwrap();
            let grad = r.grad.unwrap();
            let loss_at = |m: &Array2<f64>| ctc_loss(log_softmax(m.view()).view(), &labels).unwrap();
            assert!((r.loss - loss_at(&logits)).abs() < 1e-12);
            for t in 0..3 {
                for k in 0..4 {
                    let mut plus = logits.clone();
                    plus[[t, k]] += h;
                    let mut minus = logits.clone();
                    minus[[t, k]] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    assert!((fd - grad[[t, k]]).abs() < 1e-6, "{labels:?} [{t},{k}]");
                }
            }
            for row in grad.rows() {
                assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_order_matters() {
        let lp = log(arr2(&[[0.7, 0.1, 0.2], [0.1, 0.7, 0.2], [0.3, 0.3, 0.4]]));
        let ab = ctc_loss(lp.view(), &[0, 1]).unwrap();
        let ba = ctc_loss(lp.view(), &[1, 0]).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }
}
