use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use recite_core::audio::{write_wav, PcmSignal};
use recite_core::checkpoint;
use recite_core::codec::Alphabet;
use recite_core::config::Config;
use recite_core::ingest::read_manifest;
use recite_core::network::init_model;

const TINY_CONFIG: &str = r#"
[features]
fft_size = 64
hop_size = 32

[model]
num_gru_layers = 1
gru_units = 4
dense_units = 8

[[model.conv_layers]]
kernel = [3, 5]
stride = [2, 2]
filters = 2

[train]
epochs = 1
batch_size = 4

[decode]
beam_width = 4
"#;

const VERSES: [&str; 5] = ["قُلْ هُوَ", "اللَّهُ أَحَدٌ", "اللَّهُ الصَّمَدُ", "لَمْ يَلِدْ", "وَلَمْ يُولَدْ"];

fn recite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recite-ctc"))
        .args(args)
        .env("RECITE_CTC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(out));
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_clip(path: &Path, freq: f64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let rate = 8000.0;
    let samples = (0..2400).map(|i| 0.3 * (2.0 * PI * freq * i as f64 / rate).sin()).collect();
    write_wav(path, &PcmSignal::new(samples, 8000).unwrap()).unwrap();
}

/// Two reciters, two chapters of five verses each.
fn dataset(root: &Path) {
    let mut tsv = String::new();
    for chapter in 1..=2 {
        for (v, text) in VERSES.iter().enumerate() {
            tsv.push_str(&format!("{chapter}\t{}\t{text}\n", v + 1));
        }
    }
    fs::write(root.join("transcripts.tsv"), tsv).unwrap();
    for (r, reciter) in ["alpha", "beta"].iter().enumerate() {
        for chapter in 1..=2 {
            for verse in 1..=5 {
                let freq = 200.0 + 100.0 * (r + chapter + verse) as f64;
                write_clip(&root.join(reciter).join(format!("{chapter:03}")).join(format!("{verse:03}.wav")), freq);
            }
        }
    }
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("dataset");
        fs::create_dir_all(&root).unwrap();
        dataset(&root);
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY_CONFIG).unwrap();
        Self {
            data: dir.path().join("prepared"),
            root,
            config,
            _dir: dir,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self._dir.path().join(name)
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn prepare(&self) -> Output {
        recite(&["--config", Self::s(&self.config), "prepare", Self::s(&self.root), Self::s(&self.data)])
    }

    fn train(&self) -> PathBuf {
        assert_success(&self.prepare());
        let out_dir = self.path("run");
        let out = recite(&[
            "--config",
            Self::s(&self.config),
            "train",
            "--train",
            Self::s(&self.data.join("train.jsonl")),
            "--val",
            Self::s(&self.data.join("val.jsonl")),
            "--out-dir",
            Self::s(&out_dir),
        ]);
        assert_success(&out);
        out_dir
    }
}

#[test]
fn prepare_writes_manifest_splits_and_audit() {
    let ws = Workspace::new();
    assert_success(&ws.prepare());
    let alphabet = Alphabet::default_arabic();
    let all = read_manifest(&ws.data.join("manifest.jsonl"), &alphabet).unwrap();
    assert_eq!(all.len(), 20);
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|s| read_manifest(&ws.data.join(format!("{s}.jsonl")), &alphabet).unwrap().len())
        .collect();
    assert_eq!(sizes, [16, 2, 2]);
    assert_eq!(fs::read_to_string(ws.data.join("rejects.jsonl")).unwrap(), "");

    let audit: Value = serde_json::from_str(&fs::read_to_string(ws.data.join("alphabet_audit.json")).unwrap()).unwrap();
    assert_eq!(audit["entries"], 20);
    assert_eq!(audit["symbol_counts"]["ل"], 4 * 10);
    let saved = Config::load(&ws.data.join("config.toml")).unwrap();
    assert_eq!(saved.features.fft_size, 64);
    assert_eq!(audit["config_hash"], saved.hash());
}

#[test]
fn prepare_by_reciter_keeps_reciters_together() {
    let ws = Workspace::new();
    let out = recite(&["prepare", "--by-reciter", Workspace::s(&ws.root), Workspace::s(&ws.data)]);
    assert_success(&out);
    let alphabet = Alphabet::default_arabic();
    let train = read_manifest(&ws.data.join("train.jsonl"), &alphabet).unwrap();
    let test = read_manifest(&ws.data.join("test.jsonl"), &alphabet).unwrap();
    for e in &test {
        assert!(train.iter().all(|t| t.reciter != e.reciter));
    }
}

#[test]
fn prepare_is_deterministic_for_a_seed() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    for out in [&a, &b] {
        assert_success(&recite(&["--seed", "5", "prepare", Workspace::s(&ws.root), Workspace::s(out)]));
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn unreadable_root_is_an_error() {
    let ws = Workspace::new();
    let out = recite(&["prepare", Workspace::s(&ws.path("missing")), Workspace::s(&ws.data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
}

#[test]
fn strict_prepare_exits_2_on_rejected_clips() {
    let ws = Workspace::new();
    let tsv = fs::read_to_string(ws.root.join("transcripts.tsv")).unwrap();
    fs::write(ws.root.join("transcripts.tsv"), tsv.replace("لَمْ يَلِدْ", "lam yalid")).unwrap();

    let lenient = recite(&["prepare", Workspace::s(&ws.root), Workspace::s(&ws.data)]);
    assert_success(&lenient);
    let rejects = jsonl(&fs::read_to_string(ws.data.join("rejects.jsonl")).unwrap());
    assert_eq!(rejects.len(), 4);

    let strict = recite(&["prepare", "--strict", Workspace::s(&ws.root), Workspace::s(&ws.data)]);
    assert_eq!(strict.status.code(), Some(2), "{}", stderr(&strict));
}

#[test]
fn train_decode_and_eval() {
    let ws = Workspace::new();
    let run = ws.train();
    for f in ["best.ckpt", "final.ckpt", "config.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = jsonl(&fs::read_to_string(run.join("train_log.jsonl")).unwrap());
    assert_eq!(log.len(), 1);
    assert!(log[0]["train_loss"].as_f64().unwrap().is_finite());
    let hash = Config::load(&run.join("config.toml")).unwrap().hash();
    assert_eq!(log[0]["config_hash"], hash.as_str());

    let cfg = Workspace::s(&ws.config);
    let ckpt = run.join("best.ckpt");
    let manifest = ws.data.join("manifest.jsonl");
    let decode = |extra: &[&str]| {
        let mut args = vec!["--config", cfg, "decode", Workspace::s(&ckpt), Workspace::s(&manifest)];
        args.extend_from_slice(extra);
        let out = recite(&args);
        assert_success(&out);
        String::from_utf8(out.stdout).unwrap()
    };

    let first = decode(&[]);
    assert_eq!(first, decode(&[]), "decoding is not deterministic");
    let records = jsonl(&first);
    let entries = read_manifest(&manifest, &Alphabet::default_arabic()).unwrap();
    assert_eq!(records.len(), entries.len());
    for (r, e) in records.iter().zip(&entries) {
        assert_eq!(r["id"], e.id.as_str());
        assert_eq!(r["config_hash"], hash.as_str());
        assert!(r["score"].as_f64().unwrap() <= 0.0);
    }

    assert_eq!(jsonl(&decode(&["--greedy"])).len(), 20);

    let wav = entries[0].audio_path.to_str().unwrap();
    let single = recite(&["--config", cfg, "decode", Workspace::s(&ckpt), wav]);
    assert_success(&single);
    let single = jsonl(&String::from_utf8(single.stdout).unwrap());
    assert_eq!(single.len(), 1);
    assert_eq!(single[0]["text"], records[0]["text"]);

    let report = ws.path("eval.jsonl");
    let out = recite(&["--config", cfg, "eval", Workspace::s(&ckpt), Workspace::s(&manifest), "--out", Workspace::s(&report)]);
    assert_success(&out);
    let lines = jsonl(&fs::read_to_string(&report).unwrap());
    let (utts, summary) = lines.split_at(lines.len() - 1);
    assert_eq!(utts.len(), 20);
    assert!(utts.iter().all(|u| u["kind"] == "utterance"));
    let summary = &summary[0];
    assert_eq!(summary["kind"], "summary");
    let errors: u64 = utts
        .iter()
        .map(|u| {
            let w = &u["report"]["word"];
            w["substitutions"].as_u64().unwrap() + w["deletions"].as_u64().unwrap() + w["insertions"].as_u64().unwrap()
        })
        .sum();
    let words: u64 = utts.iter().map(|u| u["report"]["word"]["reference_length"].as_u64().unwrap()).sum();
    assert_eq!(summary["word_errors"].as_u64().unwrap(), errors);
    assert_eq!(summary["words"].as_u64().unwrap(), words);
    assert!((summary["wer"].as_f64().unwrap() - errors as f64 / words as f64).abs() < 1e-12);

    // feature settings that disagree with the checkpoint
    let out = recite(&["--config", cfg, "--fft-size", "128", "decode", Workspace::s(&ckpt), wav]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn greedy_equals_width_one_beam_on_one_hot_posteriors() {
    let ws = Workspace::new();
    assert_success(&ws.prepare());
    let mut cfg = Config::from_toml(TINY_CONFIG).unwrap();
    cfg.sync_input_bins();
    let alphabet = Alphabet::default_arabic();
    let mut params = init_model(&cfg.model, 0).unwrap();
    params.output.weight.fill(0.0);
    params.output.bias.fill(0.0);
    params.output.bias[alphabet.index_of('ب').unwrap()] = 80.0;
    let ckpt = ws.path("one-hot.ckpt");
    checkpoint::save(&ckpt, &params, &alphabet).unwrap();
    let manifest = ws.data.join("test.jsonl");
    let texts = |extra: &[&str]| {
        let mut args = vec!["--config", Workspace::s(&ws.config), "decode", Workspace::s(&ckpt), Workspace::s(&manifest)];
        args.extend_from_slice(extra);
        let out = recite(&args);
        assert_success(&out);
        jsonl(&String::from_utf8(out.stdout).unwrap()).into_iter().map(|r| r["text"].clone()).collect::<Vec<_>>()
    };
    let greedy = texts(&["--greedy"]);
    assert_eq!(greedy, texts(&["--beam-width", "1"]));
    assert!(greedy.iter().all(|t| t == "ب"));
}

#[test]
fn checkpoint_for_another_alphabet_is_rejected() {
    let ws = Workspace::new();
    assert_success(&ws.prepare());
    let mut cfg = Config::from_toml(TINY_CONFIG).unwrap();
    cfg.sync_input_bins();
    let params = init_model(&cfg.model, 0).unwrap();
    let foreign = Alphabet::from_symbols(vec!['a', 'b']).unwrap();
    let ckpt = ws.path("foreign.ckpt");
    fs::write(&ckpt, checkpoint::to_bytes(&params, &foreign.hash()).unwrap()).unwrap();
    let out = recite(&[
        "--config",
        Workspace::s(&ws.config),
        "decode",
        Workspace::s(&ckpt),
        Workspace::s(&ws.data.join("test.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("alphabet"), "{}", stderr(&out));
}

#[test]
fn diff_reports_edits_per_id() {
    let ws = Workspace::new();
    let (r, h) = (ws.path("ref.tsv"), ws.path("hyp.tsv"));
    fs::write(&r, "v1\tقُلْ هُوَ اللَّهُ\nv2\tلَمْ يَلِدْ\n").unwrap();
    fs::write(&h, "v2\tلَمْ يَلِدْ\nv1\tقُلْ هُوَ اللَّهِ أَحَدٌ\n").unwrap();
    let out = recite(&["diff", Workspace::s(&r), Workspace::s(&h)]);
    assert_success(&out);
    let records = jsonl(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(records[0]["id"], "v1");
    let word = &records[0]["report"]["word"];
    assert_eq!((word["substitutions"].as_u64(), word["insertions"].as_u64()), (Some(1), Some(1)));
    assert_eq!(records[0]["report"]["diacritic_substitutions"].as_array().unwrap().len(), 1);
    assert_eq!(records[1]["report"]["word"]["rate"], 0.0);

    fs::write(&h, "v1\tقُلْ\nv3\tلَمْ\n").unwrap();
    let out = recite(&["diff", Workspace::s(&r), Workspace::s(&h)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("v2"), "{}", stderr(&out));
}
