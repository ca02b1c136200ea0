//! Recognition alphabet and transcript codec.
//!
//! The alphabet is an ordered list of 45 code points loaded from a symbol
//! file. Index `i` of the list is output class `i`; the CTC blank takes the
//! class right after the last symbol, giving 46 output classes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of symbols in the recognition alphabet (blank excluded).
pub const ALPHABET_SIZE: usize = 45;
/// Class index of the CTC blank.
pub const BLANK_INDEX: usize = ALPHABET_SIZE;
/// Number of output classes of the encoder.
pub const NUM_CLASSES: usize = ALPHABET_SIZE + 1;

/// Opening sentence removed from first-verse transcripts.
pub const BASMALA: &str = "بِسْمِ اللَّهِ الرَّحْمَنِ الرَّحِيمِ";

const DEFAULT_ALPHABET: &str = include_str!("../data/alphabet.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("code point {code_point:?} (U+{:04X}) at position {position} is not in the alphabet", *code_point as u32)]
    OutOfAlphabet { position: usize, code_point: char },
    #[error("label index {index} out of range for an alphabet of {size} symbols")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("alphabet line {line}: {reason}")]
    BadSymbolLine { line: usize, reason: String },
    #[error("alphabet symbol {0:?} listed more than once")]
    DuplicateSymbol(char),
    #[error("alphabet has {found} symbols, expected {expected}")]
    WrongSymbolCount { found: usize, expected: usize },
    #[error("failed to read alphabet file: {0}")]
    Io(String),
}

/// Ordered recognition alphabet with a bijective symbol/index map.
#[derive(Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl fmt::Debug for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Alphabet")
            .field("symbols", &self.symbols)
            .finish()
    }
}

impl Alphabet {
    /// The shipped 45-symbol alphabet.
    pub fn default_arabic() -> Self {
        Self::parse(DEFAULT_ALPHABET).expect("bundled alphabet file is valid")
    }

    /// Parses an alphabet file and enforces the 45-symbol count.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let symbols = parse_symbol_lines(text)?;
        if symbols.len() != ALPHABET_SIZE {
            return Err(CodecError::WrongSymbolCount {
                found: symbols.len(),
                expected: ALPHABET_SIZE,
            });
        }
        Self::from_symbols(symbols)
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CodecError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds an alphabet of any size. Only [`Alphabet::parse`] enforces the
    /// production count; tests use small alphabets through this constructor.
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self, CodecError> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(CodecError::DuplicateSymbol(c));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Class index of the blank for this alphabet.
    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    /// Symbols that are Arabic vocalization marks.
    pub fn diacritics(&self) -> impl Iterator<Item = char> + '_ {
        self.symbols.iter().copied().filter(|&c| is_diacritic(c))
    }

    /// Hex SHA-256 over the ordered symbol list. Checkpoints and manifests
    /// carry it so a model is never paired with a reordered alphabet.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.symbols {
            hasher.update((*c as u32).to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, CodecError> {
        encode(text, self)
    }

    pub fn decode(&self, labels: &[usize]) -> Result<String, CodecError> {
        decode_labels(labels, self)
    }
}

/// Arabic harakat, tanween, shadda, sukun and the superscript alef.
pub fn is_diacritic(c: char) -> bool {
    matches!(c as u32, 0x064B..=0x065F | 0x0670)
}

fn parse_symbol_lines(text: &str) -> Result<Vec<char>, CodecError> {
    let mut symbols = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| CodecError::BadSymbolLine {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        if let Some(rest) = line.strip_prefix("U+") {
            let hex_digits: String = rest.chars().take_while(|c| c.is_ascii_hexdigit()).collect();
            let tail = &rest[hex_digits.len()..];
            if hex_digits.is_empty() || !(tail.is_empty() || tail.starts_with(char::is_whitespace)) {
                return Err(bad("malformed U+XXXX code point"));
            }
            let value = u32::from_str_radix(&hex_digits, 16).map_err(|_| bad("bad hex"))?;
            symbols.push(char::from_u32(value).ok_or_else(|| bad("not a Unicode scalar value"))?);
        } else {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(bad("expected exactly one code point")),
            }
        }
    }
    Ok(symbols)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ordered symbol indices, never containing the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    /// Wraps indices after checking each is a symbol of `alphabet`.
    pub fn new(indices: Vec<usize>, alphabet: &Alphabet) -> Result<Self, CodecError> {
        if let Some(&index) = indices.iter().find(|&&i| i >= alphabet.len()) {
            return Err(CodecError::IndexOutOfRange {
                index,
                size: alphabet.len(),
            });
        }
        Ok(Self(indices))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl AsRef<[usize]> for LabelSequence {
    fn as_ref(&self) -> &[usize] {
        &self.0
    }
}

pub fn encode(text: &str, alphabet: &Alphabet) -> Result<LabelSequence, CodecError> {
    text.chars()
        .enumerate()
        .map(|(position, c)| {
            alphabet
                .index_of(c)
                .ok_or(CodecError::OutOfAlphabet { position, code_point: c })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(LabelSequence)
}

pub fn decode_labels(labels: &[usize], alphabet: &Alphabet) -> Result<String, CodecError> {
    labels
        .iter()
        .map(|&index| {
            alphabet.symbol(index).ok_or(CodecError::IndexOutOfRange {
                index,
                size: alphabet.len(),
            })
        })
        .collect()
}

/// Collapses whitespace runs to single spaces, trims the ends and, when
/// `strip_basmala` is set, drops leading Basmala sentences.
///
/// Repeated leading Basmalas are all removed so the function stays
/// idempotent.
pub fn normalize_transcript(raw: &str, strip_basmala: bool) -> String {
    let collapsed = collapse_whitespace(raw);
    if !strip_basmala {
        return collapsed;
    }
    let mut rest = collapsed.as_str();
    while let Some(tail) = rest.strip_prefix(BASMALA) {
        if !(tail.is_empty() || tail.starts_with(' ')) {
            break;
        }
        rest = tail.trim_start();
    }
    rest.to_string()
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
