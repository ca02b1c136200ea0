use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use recite_core::audio::{featurize, load_wav};
use recite_core::checkpoint;
use recite_core::codec::{decode_labels, normalize_transcript, Alphabet};
use recite_core::config::Config;
use recite_core::ctc::ctc_loss;
use recite_core::decoder::{beam_search_decode, greedy_labels, DecoderConfig};
use recite_core::ingest::{
    build_manifest, read_manifest, split_manifest, write_manifest, write_rejects, ManifestEntry, SplitSpec,
};
use recite_core::metrics::{error_report, CorpusTotals, ErrorReport};
use recite_core::network::{infer, init_model, ModelParams};
use recite_core::trainer::{train, EpochRecord, Utterance};

use crate::{Cli, Command, DecodeArgs, GlobalArgs};

pub const THREADS_ENV: &str = "RECITE_CTC_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{count} clips rejected (see {path})")]
    StrictRejects { count: usize, path: PathBuf },
    #[error("id {0} is not present in both files")]
    IdMismatch(String),
    #[error("id {0} appears more than once")]
    DuplicateId(String),
    #[error("utterance {0} has an empty reference transcript")]
    EmptyReference(String),
    #[error("checkpoint expects {checkpoint} input bins but the feature settings give {features}")]
    InputBins { checkpoint: usize, features: usize },
    #[error("{THREADS_ENV} must be a positive integer, got {0:?}")]
    BadThreads(String),
}

impl CliError {
    /// Problems with the input data rather than the run itself.
    pub fn is_data_quality(&self) -> bool {
        matches!(
            self,
            Self::StrictRejects { .. } | Self::IdMismatch(_) | Self::DuplicateId(_) | Self::EmptyReference(_)
        )
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut config = resolve_config(&cli.global)?;
    match cli.command {
        Command::Prepare {
            dataset_root,
            out_dir,
            strict,
            by_reciter,
        } => prepare(&config, &dataset_root, &out_dir, strict, by_reciter),
        Command::Train {
            train,
            val,
            out_dir,
            epochs,
            batch_size,
            lr,
        } => {
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(b) = batch_size {
                config.train.batch_size = b;
            }
            if let Some(lr) = lr {
                config.train.adam.learning_rate = lr;
            }
            run_training(&config, &train, val.as_deref(), &out_dir)
        }
        Command::Decode {
            checkpoint,
            input,
            decode,
            out,
        } => {
            apply_decode_args(&mut config, &decode);
            decode_command(&config, &checkpoint, &input, decode.greedy, out.as_deref())
        }
        Command::Eval {
            checkpoint,
            manifest,
            decode,
            out,
        } => {
            apply_decode_args(&mut config, &decode);
            eval_command(&config, &checkpoint, &manifest, decode.greedy, out.as_deref())
        }
        Command::Diff {
            reference,
            hypothesis,
            out,
        } => diff_command(&config, &reference, &hypothesis, out.as_deref()),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or(CliError::BadThreads(raw))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn resolve_config(args: &GlobalArgs) -> Result<Config> {
    let mut config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(fft) = args.fft_size {
        config.features.fft_size = fft;
    }
    if let Some(hop) = args.hop_size {
        config.features.hop_size = hop;
    }
    config.sync_input_bins();
    Ok(config)
}

fn apply_decode_args(config: &mut Config, args: &DecodeArgs) {
    if let Some(w) = args.beam_width {
        config.decode.beam_width = w;
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_record(out: &mut dyn Write, record: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct AlphabetAudit {
    config_hash: String,
    alphabet_hash: String,
    entries: usize,
    rejects: usize,
    symbol_counts: BTreeMap<String, usize>,
    unused_symbols: Vec<String>,
}

fn prepare(config: &Config, root: &Path, out_dir: &Path, strict: bool, by_reciter: bool) -> Result<()> {
    let alphabet = Alphabet::default_arabic();
    let hash = config.hash();
    let manifest = build_manifest(root, &alphabet)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest.entries, &alphabet, Some(&hash))?;
    let rejects_path = out_dir.join("rejects.jsonl");
    write_rejects(&rejects_path, &manifest.rejects)?;

    let spec = SplitSpec {
        seed: config.train.seed,
        by_reciter,
        ..SplitSpec::default()
    };
    let splits = split_manifest(&manifest.entries, &spec)?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_manifest(&out_dir.join(format!("{name}.jsonl")), part, &alphabet, Some(&hash))?;
    }
    fs::write(out_dir.join("config.toml"), config.to_toml())?;

    let mut counts: BTreeMap<String, usize> = alphabet.symbols().iter().map(|c| (c.to_string(), 0)).collect();
    for e in &manifest.entries {
        for c in e.transcript.chars() {
            *counts.entry(c.to_string()).or_default() += 1;
        }
    }
    let audit = AlphabetAudit {
        config_hash: hash,
        alphabet_hash: alphabet.hash(),
        entries: manifest.entries.len(),
        rejects: manifest.rejects.len(),
        unused_symbols: counts.iter().filter(|(_, &n)| n == 0).map(|(s, _)| s.clone()).collect(),
        symbol_counts: counts,
    };
    fs::write(out_dir.join("alphabet_audit.json"), serde_json::to_string_pretty(&audit)? + "\n")?;
    eprintln!(
        "{} clips: {} train, {} val, {} test; {} rejected",
        manifest.entries.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        manifest.rejects.len()
    );
    if strict && !manifest.rejects.is_empty() {
        return Err(CliError::StrictRejects {
            count: manifest.rejects.len(),
            path: rejects_path,
        }
        .into());
    }
    Ok(())
}

fn features_for(config: &Config, path: &Path) -> Result<ndarray::Array2<f64>> {
    let signal = load_wav(path).with_context(|| format!("reading {}", path.display()))?;
    let feats = featurize(&signal, &config.features).with_context(|| format!("featurizing {}", path.display()))?;
    Ok(feats.frames)
}

fn load_utterances(config: &Config, manifest: &Path, alphabet: &Alphabet) -> Result<Vec<Utterance>> {
    let entries = read_manifest(manifest, alphabet).with_context(|| format!("reading {}", manifest.display()))?;
    entries
        .par_iter()
        .map(|e| {
            Ok(Utterance {
                id: e.id.clone(),
                features: features_for(config, &e.audio_path)?,
                labels: alphabet.encode(&e.transcript)?.into_inner(),
            })
        })
        .collect()
}

fn run_training(config: &Config, train_manifest: &Path, val_manifest: Option<&Path>, out_dir: &Path) -> Result<()> {
    config.check()?;
    config.train.validate()?;
    let alphabet = Alphabet::default_arabic();
    let hash = config.hash();
    let train_set = load_utterances(config, train_manifest, &alphabet)?;
    let val_set = match val_manifest {
        Some(p) => load_utterances(config, p, &alphabet)?,
        None => Vec::new(),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.to_toml())?;
    let mut log = BufWriter::new(fs::File::create(out_dir.join("train_log.jsonl"))?);
    let mut log_error: Option<anyhow::Error> = None;
    let init = init_model(&config.model, config.train.seed)?;
    let outcome = train(init, &train_set, &val_set, &alphabet, &config.train, &hash, |record: &EpochRecord, _| {
        if log_error.is_none() {
            if let Err(e) = write_record(&mut log, record).and_then(|()| Ok(log.flush()?)) {
                log_error = Some(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.context("writing the training log"));
    }
    checkpoint::save(&out_dir.join("best.ckpt"), &outcome.best, &alphabet)?;
    checkpoint::save(&out_dir.join("final.ckpt"), &outcome.final_params, &alphabet)?;
    eprintln!(
        "trained {} epochs; best epoch {}",
        outcome.log.records.len(),
        outcome.best_epoch
    );
    Ok(())
}

fn load_model(config: &Config, path: &Path, alphabet: &Alphabet) -> Result<ModelParams> {
    let params = checkpoint::load(path, alphabet).with_context(|| format!("loading {}", path.display()))?;
    if params.config.input_bins != config.features.num_bins() {
        return Err(CliError::InputBins {
            checkpoint: params.config.input_bins,
            features: config.features.num_bins(),
        }
        .into());
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize)]
struct Transcript {
    id: String,
    text: String,
    /// Log-probability of `text` under the model, summed over alignments.
    score: f64,
    config_hash: String,
}

fn transcribe(
    params: &ModelParams,
    config: &Config,
    alphabet: &Alphabet,
    greedy: bool,
    id: &str,
    audio: &Path,
) -> Result<Transcript> {
    let post = infer(params, features_for(config, audio)?.view())?;
    let (text, score) = if greedy {
        let labels = greedy_labels(&post);
        let score = -ctc_loss(post.log_probs().view(), &labels)?;
        (decode_labels(&labels, alphabet)?, score)
    } else {
        let decoder = DecoderConfig {
            top_k: 1,
            ..config.decode.clone()
        };
        let r = beam_search_decode(&post, alphabet, &decoder)?;
        (r.text, r.log_prob)
    };
    Ok(Transcript {
        id: id.to_owned(),
        text,
        score,
        config_hash: config.hash(),
    })
}

fn decode_inputs(input: &Path, alphabet: &Alphabet) -> Result<Vec<ManifestEntry>> {
    let is_wav = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if !is_wav {
        return Ok(read_manifest(input, alphabet).with_context(|| format!("reading {}", input.display()))?);
    }
    let id = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    Ok(vec![ManifestEntry {
        id,
        audio_path: input.to_path_buf(),
        reciter: String::new(),
        chapter: 0,
        verse: 0,
        transcript: String::new(),
        duration_secs: 0.0,
    }])
}

fn decode_all(config: &Config, params: &ModelParams, entries: &[ManifestEntry], greedy: bool) -> Result<Vec<Transcript>> {
    let alphabet = Alphabet::default_arabic();
    entries
        .par_iter()
        .map(|e| transcribe(params, config, &alphabet, greedy, &e.id, &e.audio_path))
        .collect()
}

fn decode_command(config: &Config, ckpt: &Path, input: &Path, greedy: bool, out: Option<&Path>) -> Result<()> {
    let alphabet = Alphabet::default_arabic();
    let params = load_model(config, ckpt, &alphabet)?;
    let entries = decode_inputs(input, &alphabet)?;
    let mut sink = output(out)?;
    for t in decode_all(config, &params, &entries, greedy)? {
        write_record(&mut sink, &t)?;
    }
    sink.flush()?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EvalRecord<'a> {
    Utterance {
        id: &'a str,
        config_hash: &'a str,
        score: f64,
        report: &'a ErrorReport,
    },
    Summary {
        config_hash: &'a str,
        utterances: usize,
        /// Pooled over the corpus.
        wer: f64,
        cer: f64,
        /// Unweighted mean of per-utterance rates.
        mean_utterance_wer: f64,
        mean_utterance_cer: f64,
        word_errors: usize,
        words: usize,
        char_errors: usize,
        chars: usize,
    },
}

fn eval_command(config: &Config, ckpt: &Path, manifest: &Path, greedy: bool, out: Option<&Path>) -> Result<()> {
    let alphabet = Alphabet::default_arabic();
    let params = load_model(config, ckpt, &alphabet)?;
    let entries = read_manifest(manifest, &alphabet).with_context(|| format!("reading {}", manifest.display()))?;
    if let Some(e) = entries.iter().find(|e| e.transcript.trim().is_empty()) {
        return Err(CliError::EmptyReference(e.id.clone()).into());
    }
    let transcripts = decode_all(config, &params, &entries, greedy)?;
    let hash = config.hash();
    let mut sink = output(out)?;
    let mut totals = CorpusTotals::default();
    let (mut wer_sum, mut cer_sum) = (0.0, 0.0);
    for (e, t) in entries.iter().zip(&transcripts) {
        let report = error_report(&e.transcript, &t.text)?;
        totals.add(&report);
        wer_sum += report.word.rate;
        cer_sum += report.char.rate;
        write_record(
            &mut sink,
            &EvalRecord::Utterance {
                id: &e.id,
                config_hash: &hash,
                score: t.score,
                report: &report,
            },
        )?;
    }
    let n = totals.utterances.max(1) as f64;
    write_record(
        &mut sink,
        &EvalRecord::Summary {
            config_hash: &hash,
            utterances: totals.utterances,
            wer: totals.wer(),
            cer: totals.cer(),
            mean_utterance_wer: wer_sum / n,
            mean_utterance_cer: cer_sum / n,
            word_errors: totals.word_errors,
            words: totals.words,
            char_errors: totals.char_errors,
            chars: totals.chars,
        },
    )?;
    sink.flush()?;
    eprintln!("WER {:.4} CER {:.4} over {} utterances", totals.wer(), totals.cer(), totals.utterances);
    Ok(())
}

/// `id<TAB>text` lines; blank lines are skipped.
fn read_transcript_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected id<TAB>text", path.display(), i + 1))?;
        if seen.insert(id.to_owned(), ()).is_some() {
            return Err(CliError::DuplicateId(id.to_owned()).into());
        }
        out.push((id.to_owned(), normalize_transcript(body, false)));
    }
    Ok(out)
}

#[derive(Serialize)]
struct DiffRecord<'a> {
    id: &'a str,
    config_hash: &'a str,
    report: ErrorReport,
}

fn diff_command(config: &Config, reference: &Path, hypothesis: &Path, out: Option<&Path>) -> Result<()> {
    let refs = read_transcript_file(reference)?;
    let hyps: HashMap<String, String> = read_transcript_file(hypothesis)?.into_iter().collect();
    if let Some((id, _)) = refs.iter().find(|(id, _)| !hyps.contains_key(id)) {
        return Err(CliError::IdMismatch(id.clone()).into());
    }
    if hyps.len() != refs.len() {
        let ids: std::collections::HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
        let mut extra: Vec<&String> = hyps.keys().filter(|id| !ids.contains(id.as_str())).collect();
        extra.sort();
        return Err(CliError::IdMismatch(extra[0].clone()).into());
    }
    let hash = config.hash();
    let mut sink = output(out)?;
    for (id, text) in &refs {
        let report = error_report(text, &hyps[id]).map_err(|_| CliError::EmptyReference(id.clone()))?;
        write_record(
            &mut sink,
            &DiffRecord {
                id,
                config_hash: &hash,
                report,
            },
        )?;
    }
    sink.flush()?;
    Ok(())
}
