//! Levenshtein alignment with typed, positioned edit operations, word and
//! character error rates, and per-utterance error reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::is_diacritic;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("edit op {index} does not apply to the reference")]
    InvalidOp { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    /// Absent for insertions.
    pub ref_pos: Option<usize>,
    /// Absent for deletions.
    pub hyp_pos: Option<usize>,
    pub ref_token: Option<String>,
    pub hyp_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub matches: usize,
    /// In reference order, matches included.
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimum-cost alignment with unit costs. When several alignments are
/// optimal the backtrace prefers match, then substitution, deletion and
/// insertion.
pub fn align<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Result<Alignment, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let same = |i: usize, j: usize| reference[i].as_ref() == hypothesis[j].as_ref();
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        d[i * width] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * width + j - 1] + usize::from(!same(i - 1, j - 1));
            let del = d[(i - 1) * width + j] + 1;
            let ins = d[i * width + j - 1] + 1;
            d[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut out = Alignment {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        matches: 0,
        ops: Vec::with_capacity(n.max(m)),
    };
    let token = |s: &str| Some(s.to_owned());
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        let kind = if i > 0 && j > 0 && same(i - 1, j - 1) && here == d[(i - 1) * width + j - 1] {
            EditKind::Match
        } else if i > 0 && j > 0 && here == d[(i - 1) * width + j - 1] + 1 {
            EditKind::Substitute
        } else if i > 0 && here == d[(i - 1) * width + j] + 1 {
            EditKind::Delete
        } else {
            EditKind::Insert
        };
        let op = match kind {
            EditKind::Match | EditKind::Substitute => {
                i -= 1;
                j -= 1;
                if kind == EditKind::Match {
                    out.matches += 1;
                } else {
                    out.substitutions += 1;
                }
                EditOp {
                    kind,
                    ref_pos: Some(i),
                    hyp_pos: Some(j),
                    ref_token: token(reference[i].as_ref()),
                    hyp_token: token(hypothesis[j].as_ref()),
                }
            }
            EditKind::Delete => {
                i -= 1;
                out.deletions += 1;
                EditOp {
                    kind,
                    ref_pos: Some(i),
                    hyp_pos: None,
                    ref_token: token(reference[i].as_ref()),
                    hyp_token: None,
                }
            }
            EditKind::Insert => {
                j -= 1;
                out.insertions += 1;
                EditOp {
                    kind,
                    ref_pos: None,
                    hyp_pos: Some(j),
                    ref_token: None,
                    hyp_token: token(hypothesis[j].as_ref()),
                }
            }
        };
        out.ops.push(op);
    }
    out.ops.reverse();
    Ok(out)
}

/// Applies `ops` to `reference`, returning the hypothesis tokens they
/// describe. Match ops may be omitted: reference tokens not covered by an
/// op are copied through. Fails if an op disagrees with the reference.
pub fn replay<R: AsRef<str>>(reference: &[R], ops: &[EditOp]) -> Result<Vec<String>, MetricsError> {
    let mut next_ref = 0;
    let mut hyp: Vec<String> = Vec::new();
    let copy_until = |next_ref: &mut usize, hyp: &mut Vec<String>, stop: &dyn Fn(usize, usize) -> bool| {
        while *next_ref < reference.len() && !stop(*next_ref, hyp.len()) {
            hyp.push(reference[*next_ref].as_ref().to_owned());
            *next_ref += 1;
        }
    };
    for (index, op) in ops.iter().enumerate() {
        let bad = || MetricsError::InvalidOp { index };
        match op.kind {
            EditKind::Insert => {
                let at = op.hyp_pos.ok_or_else(bad)?;
                copy_until(&mut next_ref, &mut hyp, &|_, h| h >= at);
                if hyp.len() != at {
                    return Err(bad());
                }
                hyp.push(op.hyp_token.clone().ok_or_else(bad)?);
            }
            kind => {
                let pos = op.ref_pos.ok_or_else(bad)?;
                copy_until(&mut next_ref, &mut hyp, &|r, _| r >= pos);
                if next_ref != pos || reference.get(pos).map(AsRef::as_ref) != op.ref_token.as_deref() {
                    return Err(bad());
                }
                if kind != EditKind::Delete && op.hyp_pos != Some(hyp.len()) {
                    return Err(bad());
                }
                next_ref += 1;
                match kind {
                    EditKind::Match => hyp.push(op.ref_token.clone().ok_or_else(bad)?),
                    EditKind::Substitute => hyp.push(op.hyp_token.clone().ok_or_else(bad)?),
                    _ => {}
                }
            }
        }
    }
    copy_until(&mut next_ref, &mut hyp, &|_, _| false);
    Ok(hyp)
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Unicode code points, spaces and diacritics included.
pub fn chars(text: &str) -> Vec<String> {
    text.chars().map(String::from).collect()
}

fn rate(a: &Alignment, reference_length: usize) -> f64 {
    a.errors() as f64 / reference_length as f64
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, MetricsError> {
    let r = words(reference);
    Ok(rate(&align(&r, &words(hypothesis))?, r.len()))
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, MetricsError> {
    let r = chars(reference);
    Ok(rate(&align(&r, &chars(hypothesis))?, r.len()))
}

/// Counts and operations at one tokenization level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference token count: `N` for words, `M` for characters.
    pub reference_length: usize,
    pub rate: f64,
    /// Non-match operations only, in reference order.
    pub ops: Vec<EditOp>,
}

impl LevelReport {
    fn from_alignment(a: Alignment, reference_length: usize) -> Self {
        Self {
            substitutions: a.substitutions,
            deletions: a.deletions,
            insertions: a.insertions,
            reference_length,
            rate: rate(&a, reference_length),
            ops: a.ops.into_iter().filter(|op| op.kind != EditKind::Match).collect(),
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub reference: String,
    pub hypothesis: String,
    pub word: LevelReport,
    pub char: LevelReport,
    /// Character substitutions where both tokens are diacritics.
    pub diacritic_substitutions: Vec<EditOp>,
}

pub fn error_report(reference: &str, hypothesis: &str) -> Result<ErrorReport, MetricsError> {
    let ref_words = words(reference);
    let word = LevelReport::from_alignment(align(&ref_words, &words(hypothesis))?, ref_words.len());
    let ref_chars = chars(reference);
    let char = LevelReport::from_alignment(align(&ref_chars, &chars(hypothesis))?, ref_chars.len());
    let both_diacritics = |op: &&EditOp| {
        let marked = |t: &Option<String>| t.as_deref().and_then(|s| s.chars().next()).is_some_and(is_diacritic);
        op.kind == EditKind::Substitute && marked(&op.ref_token) && marked(&op.hyp_token)
    };
    let diacritic_substitutions = char.ops.iter().filter(both_diacritics).cloned().collect();
    Ok(ErrorReport {
        reference: reference.to_owned(),
        hypothesis: hypothesis.to_owned(),
        word,
        char,
        diacritic_substitutions,
    })
}

/// Corpus-level rates pool errors and reference lengths over utterances
/// rather than averaging per-utterance rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusTotals {
    pub utterances: usize,
    pub word_errors: usize,
    pub words: usize,
    pub char_errors: usize,
    pub chars: usize,
}

impl CorpusTotals {
    pub fn add(&mut self, report: &ErrorReport) {
        self.utterances += 1;
        self.word_errors += report.word.errors();
        self.words += report.word.reference_length;
        self.char_errors += report.char.errors();
        self.chars += report.char.reference_length;
    }

    pub fn wer(&self) -> f64 {
        self.word_errors as f64 / self.words.max(1) as f64
    }

    pub fn cer(&self) -> f64 {
        self.char_errors as f64 / self.chars.max(1) as f64
    }
}
