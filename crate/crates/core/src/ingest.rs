//! Dataset manifests and train/validation/test splits.
//!
//! Expected layout:
//!
//! ```text
//! root/
//!   transcripts.tsv            chapter<TAB>verse<TAB>vocalized text
//!   <reciter>/<chapter>/<verse>.wav
//! ```
//!
//! Chapter and verse directory and file names are decimal numbers, leading
//! zeros allowed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::wav_duration_secs;
use crate::codec::{normalize_transcript, Alphabet};

pub const TRANSCRIPTS_FILE: &str = "transcripts.tsv";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read dataset root {path}: {source}")]
    Root { path: PathBuf, source: io::Error },
    #[error("transcript file {0} not found")]
    MissingTranscripts(PathBuf),
    #[error("{path}:{line}: {message}")]
    BadTranscriptLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no usable clips under {0}")]
    EmptyDataset(PathBuf),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("manifest alphabet {found} does not match {expected}")]
    AlphabetMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One clip. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: PathBuf,
    pub reciter: String,
    pub chapter: u32,
    pub verse: u32,
    pub transcript: String,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub alphabet_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub audio_path: PathBuf,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Sorted by id.
    pub entries: Vec<ManifestEntry>,
    pub rejects: Vec<Reject>,
}

pub fn utterance_id(reciter: &str, chapter: u32, verse: u32) -> String {
    format!("{reciter}-{chapter:03}-{verse:03}")
}

fn read_transcripts(root: &Path) -> Result<HashMap<(u32, u32), String>, IngestError> {
    let path = root.join(TRANSCRIPTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => IngestError::MissingTranscripts(path.clone()),
        _ => IngestError::Io(e),
    })?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |message: &str| IngestError::BadTranscriptLine {
            path: path.clone(),
            line: i + 1,
            message: message.into(),
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(c), Some(v), Some(t)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected chapter, verse and text separated by tabs"));
        };
        let chapter = c.trim().parse().map_err(|_| bad("chapter is not a number"))?;
        let verse = v.trim().parse().map_err(|_| bad("verse is not a number"))?;
        out.insert((chapter, verse), t.to_owned());
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn wav_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn number(path: &Path, stem: bool) -> Option<u32> {
    let name = if stem { path.file_stem() } else { path.file_name() };
    name?.to_str()?.parse().ok()
}

/// Pairs every clip with its verse transcript. The Basmala is stripped from
/// first-verse transcripts. Clips without a transcript, with characters
/// outside `alphabet`, or with unreadable audio are returned as rejects.
pub fn build_manifest(root: &Path, alphabet: &Alphabet) -> Result<Manifest, IngestError> {
    let root_err = |source| IngestError::Root {
        path: root.to_path_buf(),
        source,
    };
    let reciters = sorted_dirs(root).map_err(root_err)?;
    let transcripts = read_transcripts(root)?;
    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for reciter_dir in reciters {
        let reciter = reciter_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for chapter_dir in sorted_dirs(&reciter_dir)? {
            for audio_path in wav_files(&chapter_dir)? {
                let mut reject = |id: Option<String>, reason: String| {
                    rejects.push(Reject {
                        audio_path: audio_path.clone(),
                        id,
                        reason,
                    })
                };
                let (Some(chapter), Some(verse)) = (number(&chapter_dir, false), number(&audio_path, true)) else {
                    reject(None, "chapter or verse name is not a number".into());
                    continue;
                };
                let id = utterance_id(&reciter, chapter, verse);
                let Some(raw) = transcripts.get(&(chapter, verse)) else {
                    reject(Some(id), "no transcript for this verse".into());
                    continue;
                };
                let transcript = normalize_transcript(raw, verse == 1);
                if transcript.is_empty() {
                    reject(Some(id), "transcript is empty after normalization".into());
                    continue;
                }
                if let Err(e) = alphabet.encode(&transcript) {
                    reject(Some(id), e.to_string());
                    continue;
                }
                let duration_secs = match wav_duration_secs(&audio_path) {
                    Ok(d) => d,
                    Err(e) => {
                        reject(Some(id), format!("unreadable audio: {e}"));
                        continue;
                    }
                };
                entries.push(ManifestEntry {
                    id,
                    audio_path: audio_path.clone(),
                    reciter: reciter.clone(),
                    chapter,
                    verse,
                    transcript,
                    duration_secs,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(IngestError::EmptyDataset(root.to_path_buf()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    for r in &rejects {
        log::warn!("rejected {}: {}", r.audio_path.display(), r.reason);
    }
    Ok(Manifest { entries, rejects })
}

/// Writes a header line followed by one JSON record per entry.
pub fn write_manifest(
    path: &Path,
    entries: &[ManifestEntry],
    alphabet: &Alphabet,
    config_hash: Option<&str>,
) -> Result<(), IngestError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = ManifestHeader {
        format_version: MANIFEST_FORMAT_VERSION,
        alphabet_hash: alphabet.hash(),
        config_hash: config_hash.map(str::to_owned),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest written by [`write_manifest`], checking its alphabet.
pub fn read_manifest(path: &Path, alphabet: &Alphabet) -> Result<Vec<ManifestEntry>, IngestError> {
    let bad = |message: String| IngestError::BadManifest {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = io::BufReader::new(fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != MANIFEST_FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    if header.alphabet_hash != alphabet.hash() {
        return Err(IngestError::AlphabetMismatch {
            expected: alphabet.hash(),
            found: header.alphabet_hash,
        });
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
    }
    Ok(entries)
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<(), IngestError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in rejects {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// `(train, validation, test)`
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Keep every reciter inside one partition.
    pub by_reciter: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
            by_reciter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Validation and test sizes are `floor(n * ratio)`; the remainder goes
/// to training.
fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    // the slack absorbs products such as 15810 * 0.1 landing just below an integer
    let floor = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let val = floor(ratios[1]);
    let test = floor(ratios[2]).min(n - val);
    [n - val - test, val, test]
}

/// Seeded uniform shuffle, then a contiguous partition. With `by_reciter`
/// whole reciters are shuffled and partitioned instead of clips.
pub fn split_manifest(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<Splits, IngestError> {
    let r = spec.ratios;
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadRatios(r));
    }
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<ManifestEntry>> = if spec.by_reciter {
        let mut by: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
        for e in sorted {
            by.entry(e.reciter.clone()).or_default().push(e);
        }
        by.into_values().collect()
    } else {
        sorted.into_iter().map(|e| vec![e]).collect()
    };
    let mut groups = groups;
    groups.shuffle(&mut rng);
    let [n_train, n_val, _] = partition_sizes(groups.len(), r);
    let mut iter = groups.into_iter();
    let mut take = |k: usize| iter.by_ref().take(k).flatten().collect::<Vec<_>>();
    let train = take(n_train);
    let val = take(n_val);
    let test = take(usize::MAX);
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, PcmSignal};
    use crate::codec::BASMALA;

    fn entry(i: usize, reciter: &str) -> ManifestEntry {
        ManifestEntry {
            id: format!("{reciter}-{i:05}"),
            audio_path: PathBuf::from(format!("{i}.wav")),
            reciter: reciter.into(),
            chapter: 1,
            verse: i as u32,
            transcript: "بِسْمِ".into(),
            duration_secs: 1.0,
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let entries: Vec<_> = (0..10).map(|i| entry(i, "r")).collect();
        let s = split_manifest(&entries, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(partition_sizes(15810, [0.8, 0.1, 0.1]), [12648, 1581, 1581]);
        assert_eq!(partition_sizes(7, [0.5, 0.25, 0.25]), [5, 1, 1]);
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded() {
        let entries: Vec<_> = (0..103).map(|i| entry(i, "r")).collect();
        let spec = SplitSpec {
            seed: 42,
            ..SplitSpec::default()
        };
        let a = split_manifest(&entries, &spec).unwrap();
        let b = split_manifest(&entries, &spec).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).map(|e| e.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 103);
        let c = split_manifest(&entries, &SplitSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn by_reciter_keeps_speakers_together() {
        let entries: Vec<_> = (0..100).map(|i| entry(i, &format!("r{}", i % 10))).collect();
        let spec = SplitSpec {
            by_reciter: true,
            ..SplitSpec::default()
        };
        let s = split_manifest(&entries, &spec).unwrap();
        let reciters = |v: &[ManifestEntry]| v.iter().map(|e| e.reciter.clone()).collect::<std::collections::BTreeSet<_>>();
        let (tr, va, te) = (reciters(&s.train), reciters(&s.val), reciters(&s.test));
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    }

    #[test]
    fn bad_ratios() {
        let entries = vec![entry(0, "r")];
        for ratios in [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1], [f64::NAN, 0.5, 0.5]] {
            let spec = SplitSpec {
                ratios,
                ..SplitSpec::default()
            };
            assert!(matches!(split_manifest(&entries, &spec), Err(IngestError::BadRatios(_))));
        }
    }

    fn write_clip(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_wav(path, &PcmSignal::new(vec![0.0; 4410], 44_100).unwrap()).unwrap();
    }

    fn fixture(root: &Path) {
        let transcripts = format!("1\t1\t{BASMALA} الْحَمْدُ لِلَّهِ\n1\t2\tالرَّحْمَنِ الرَّحِيمِ\n2\t1\tabc\n");
        fs::write(root.join(TRANSCRIPTS_FILE), transcripts).unwrap();
        write_clip(&root.join("alpha/001/001.wav"));
        write_clip(&root.join("alpha/001/002.wav"));
        write_clip(&root.join("beta/1/1.wav"));
        write_clip(&root.join("beta/1/2.wav"));
        write_clip(&root.join("beta/1/3.wav"));
        write_clip(&root.join("beta/2/1.wav"));
    }

    #[test]
    fn manifest_from_fixture_tree() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let alphabet = Alphabet::default_arabic();
        let m = build_manifest(dir.path(), &alphabet).unwrap();
        let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["alpha-001-001", "alpha-001-002", "beta-001-001", "beta-001-002"]);
        assert_eq!(m.entries[0].transcript, "الْحَمْدُ لِلَّهِ");
        assert!((m.entries[0].duration_secs - 0.1).abs() < 1e-12);
        let reasons: Vec<_> = m.rejects.iter().map(|r| (r.id.clone().unwrap(), r.reason.clone())).collect();
        assert_eq!(reasons.len(), 2);
        assert_eq!(reasons[0].0, "beta-001-003");
        assert!(reasons[0].1.contains("no transcript"));
        assert_eq!(reasons[1].0, "beta-002-001");
        for e in &m.entries {
            let labels = alphabet.encode(&e.transcript).unwrap();
            assert_eq!(alphabet.decode(labels.as_slice()).unwrap(), e.transcript);
        }
    }

    #[test]
    fn manifest_file_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let alphabet = Alphabet::default_arabic();
        let out = tempfile::tempdir().unwrap();
        let (p1, p2) = (out.path().join("a.jsonl"), out.path().join("b.jsonl"));
        write_manifest(&p1, &build_manifest(dir.path(), &alphabet).unwrap().entries, &alphabet, Some("h")).unwrap();
        write_manifest(&p2, &build_manifest(dir.path(), &alphabet).unwrap().entries, &alphabet, Some("h")).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_manifest(&p1, &alphabet).unwrap();
        assert_eq!(back.len(), 4);
        let other = Alphabet::from_symbols(vec!['a']).unwrap();
        assert!(matches!(read_manifest(&p1, &other), Err(IngestError::AlphabetMismatch { .. })));
    }

    #[test]
    fn missing_pieces() {
        let dir = tempfile::tempdir().unwrap();
        let alphabet = Alphabet::default_arabic();
        assert!(matches!(
            build_manifest(dir.path(), &alphabet),
            Err(IngestError::MissingTranscripts(_))
        ));
        fs::write(dir.path().join(TRANSCRIPTS_FILE), "1\t1\tبِ\n").unwrap();
        assert!(matches!(build_manifest(dir.path(), &alphabet), Err(IngestError::EmptyDataset(_))));
        assert!(matches!(
            build_manifest(&dir.path().join("nope"), &alphabet),
            Err(IngestError::Root { .. })
        ));
    }
}
