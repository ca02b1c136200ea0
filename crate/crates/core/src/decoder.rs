//! Greedy best-path decoding and lexicon-free CTC prefix beam search.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_labels, Alphabet, CodecError};
use crate::ctc::{collapse, ctc_loss, log_add};
use crate::network::PosteriorMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("posterior has {found} classes but the alphabet needs {expected}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub beam_width: usize,
    /// Symbols whose frame probability falls below this are not expanded.
    /// `None` expands every symbol.
    pub prune_threshold: Option<f64>,
    /// Number of ranked candidates to return alongside the winner.
    pub top_k: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_width: 100,
            prune_threshold: Some(1e-6),
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub labels: Vec<usize>,
    pub text: String,
    /// `log P(labels | X)` summed over all alignments.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamResult {
    pub text: String,
    pub log_prob: f64,
    /// Ranked by probability, best first; `candidates[0]` is the winner.
    pub candidates: Vec<Candidate>,
}

fn check_classes(post: &PosteriorMatrix, alphabet: &Alphabet) -> Result<(), DecodeError> {
    if post.num_classes() != alphabet.num_classes() {
        return Err(DecodeError::ClassMismatch {
            expected: alphabet.num_classes(),
            found: post.num_classes(),
        });
    }
    Ok(())
}

/// Per-frame argmax, collapsed. Ties go to the lower class index.
pub fn greedy_labels(post: &PosteriorMatrix) -> Vec<usize> {
    let probs = post.probs();
    let path: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
                .0
        })
        .collect();
    collapse(&path, post.num_classes() - 1)
}

pub fn greedy_decode(post: &PosteriorMatrix, alphabet: &Alphabet) -> Result<String, DecodeError> {
    check_classes(post, alphabet)?;
    Ok(decode_labels(&greedy_labels(post), alphabet)?)
}

/// A beam entry. Prefixes live in a trie arena; `node` identifies one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamState {
    pub node: usize,
    /// Log-probability of paths for this prefix ending in blank.
    pub p_blank: f64,
    /// Log-probability of paths ending in the prefix's last symbol.
    pub p_nonblank: f64,
}

impl BeamState {
    pub fn total(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }
}

struct PrefixTrie {
    parent: Vec<usize>,
    label: Vec<usize>,
    depth: Vec<usize>,
    children: HashMap<(usize, usize), usize>,
}

const ROOT: usize = 0;

impl PrefixTrie {
    fn new() -> Self {
        Self {
            parent: vec![ROOT],
            label: vec![usize::MAX],
            depth: vec![0],
            children: HashMap::new(),
        }
    }

    fn child(&mut self, node: usize, label: usize) -> usize {
        let next = self.parent.len();
        let id = *self.children.entry((node, label)).or_insert(next);
        if id == next {
            self.parent.push(node);
            self.label.push(label);
            self.depth.push(self.depth[node] + 1);
        }
        id
    }

    fn last(&self, node: usize) -> Option<usize> {
        (node != ROOT).then(|| self.label[node])
    }

    fn labels(&self, mut node: usize) -> Vec<usize> {
        let mut out = vec![0; self.depth[node]];
        for slot in out.iter_mut().rev() {
            *slot = self.label[node];
            node = self.parent[node];
        }
        out
    }
}

fn rank(trie: &PrefixTrie, a: &BeamState, b: &BeamState) -> Ordering {
    b.total()
        .total_cmp(&a.total())
        .then_with(|| trie.labels(a.node).cmp(&trie.labels(b.node)))
}

fn merge(next: &mut HashMap<usize, BeamState>, node: usize, blank: f64, nonblank: f64) {
    let entry = next.entry(node).or_insert(BeamState {
        node,
        p_blank: f64::NEG_INFINITY,
        p_nonblank: f64::NEG_INFINITY,
    });
    entry.p_blank = log_add(entry.p_blank, blank);
    entry.p_nonblank = log_add(entry.p_nonblank, nonblank);
}

/// Prefix beam search. Probability mass of every alignment reaching the
/// same prefix is merged, so the beam ranks label sequences rather than
/// paths. Surviving prefixes are rescored exactly with the CTC forward
/// recursion before ranking the returned candidates; ties go to the
/// lexicographically smaller label sequence.
pub fn beam_search_decode(
    post: &PosteriorMatrix,
    alphabet: &Alphabet,
    config: &DecoderConfig,
) -> Result<BeamResult, DecodeError> {
    check_classes(post, alphabet)?;
    if config.beam_width == 0 {
        return Err(DecodeError::ZeroBeamWidth);
    }
    let log_probs = post.log_probs();
    let blank = post.num_classes() - 1;
    let log_threshold = config.prune_threshold.map(f64::ln);

    let mut trie = PrefixTrie::new();
    let mut beam = vec![BeamState {
        node: ROOT,
        p_blank: 0.0,
        p_nonblank: f64::NEG_INFINITY,
    }];
    let neg = f64::NEG_INFINITY;
    for frame in log_probs.rows() {
        let mut next: HashMap<usize, BeamState> = HashMap::with_capacity(beam.len() * 4);
        let symbols: Vec<usize> = (0..blank)
            .filter(|&c| log_threshold.map_or(true, |th| frame[c] >= th))
            .collect();
        for state in &beam {
            let total = state.total();
            merge(&mut next, state.node, total + frame[blank], neg);
            let last = trie.last(state.node);
            if let Some(l) = last {
                merge(&mut next, state.node, neg, state.p_nonblank + frame[l]);
            }
            for &c in &symbols {
                let child = trie.child(state.node, c);
                // a repeated symbol only starts a new label after a blank
                let source = if Some(c) == last { state.p_blank } else { total };
                merge(&mut next, child, neg, source + frame[c]);
            }
        }
        beam = next.into_values().collect();
        beam.sort_by(|a, b| rank(&trie, a, b));
        beam.truncate(config.beam_width);
    }

    let mut candidates = Vec::with_capacity(beam.len());
    for state in &beam {
        let labels = trie.labels(state.node);
        let log_prob = -ctc_loss(log_probs.view(), &labels).expect("decoded labels exclude blank");
        candidates.push((labels, log_prob));
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(config.top_k.max(1));
    let candidates = candidates
        .into_iter()
        .map(|(labels, log_prob)| {
            Ok(Candidate {
                text: decode_labels(&labels, alphabet)?,
                labels,
                log_prob,
            })
        })
        .collect::<Result<Vec<_>, CodecError>>()?;
    Ok(BeamResult {
        text: candidates[0].text.clone(),
        log_prob: candidates[0].log_prob,
        candidates,
    })
}
