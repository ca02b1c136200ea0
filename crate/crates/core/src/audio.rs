//! PCM loading and spectrogram features.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample rate of the recitation corpus.
pub const EXPECTED_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("signal of {samples} samples is shorter than one {fft_size}-sample frame")]
    SignalTooShort { samples: usize, fft_size: usize },
    #[error("invalid feature parameters: {0}")]
    InvalidParams(String),
    #[error("empty signal")]
    EmptySignal,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptySignal);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::InvalidParams("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn open_reader(path: &Path) -> Result<hound::WavReader<std::io::BufReader<std::fs::File>>, AudioError> {
    let file = std::fs::File::open(path)?;
    hound::WavReader::new(std::io::BufReader::new(file)).map_err(map_hound)
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        // The file is already open, so read failures mean a truncated stream.
        hound::Error::IoError(e) => AudioError::CorruptHeader(e.to_string()),
        hound::Error::Unsupported => AudioError::UnsupportedFormat("codec not supported".into()),
        other => AudioError::CorruptHeader(other.to_string()),
    }
}

/// Reads a 16-bit PCM WAV file, downmixing stereo by averaging channels.
pub fn load_wav(path: &Path) -> Result<PcmSignal, AudioError> {
    let reader = open_reader(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{}-bit {:?}; only 16-bit PCM is supported",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{channels} channels; expected mono or stereo"
        )));
    }
    if spec.sample_rate != EXPECTED_SAMPLE_RATE {
        log::warn!(
            "{}: sample rate {} Hz differs from {} Hz; no resampling is applied",
            path.display(),
            spec.sample_rate,
            EXPECTED_SAMPLE_RATE
        );
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
            sum / channels as f64
        })
        .collect();
    PcmSignal::new(samples, spec.sample_rate)
}

/// Duration read from the WAV header without decoding samples.
pub fn wav_duration_secs(path: &Path) -> Result<f64, AudioError> {
    let reader = open_reader(path)?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

/// Writes a mono 16-bit WAV. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, signal: &PcmSignal) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let write_err = |e: hound::Error| match e {
        hound::Error::IoError(e) => AudioError::Io(e),
        other => AudioError::InvalidParams(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

/// Feature extraction settings (`[features]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub log_magnitude: bool,
    pub norm_epsilon: f64,
    /// Standardize each frequency bin separately instead of the whole matrix.
    pub per_bin_normalization: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fft_size: 800,
            hop_size: 400,
            log_magnitude: false,
            norm_epsilon: 1e-8,
            per_bin_normalization: false,
        }
    }
}

impl FeatureConfig {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Magnitude STFT, time-major: `frames[[t, k]]` is bin `k` of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<f64>,
    pub fft_size: usize,
    pub hop_size: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSpectrogram {
    pub frames: Array2<f64>,
    pub mean: f64,
    pub std: f64,
}

impl NormalizedSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

/// Number of whole frames; the partial tail frame is dropped.
pub fn frame_count(num_samples: usize, fft_size: usize, hop_size: usize) -> usize {
    if num_samples < fft_size {
        0
    } else {
        1 + (num_samples - fft_size) / hop_size
    }
}

/// Periodic Hann window.
pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos())
        .collect()
}

/// Reusable STFT plan for one `(fft_size, hop_size)` pair.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    fft_size: usize,
    hop_size: usize,
}

impl Stft {
    pub fn new(fft_size: usize, hop_size: usize) -> Result<Self, AudioError> {
        if fft_size < 2 {
            return Err(AudioError::InvalidParams(format!("fft_size {fft_size} < 2")));
        }
        if hop_size == 0 || hop_size > fft_size {
            return Err(AudioError::InvalidParams(format!(
                "hop_size {hop_size} must be in 1..={fft_size}"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            fft,
            window: hann_window(fft_size),
            fft_size,
            hop_size,
        })
    }

    pub fn process(&self, samples: &[f64]) -> Result<Spectrogram, AudioError> {
        if samples.len() < self.fft_size {
            return Err(AudioError::SignalTooShort {
                samples: samples.len(),
                fft_size: self.fft_size,
            });
        }
        let num_frames = frame_count(samples.len(), self.fft_size, self.hop_size);
        let bins = self.fft_size / 2 + 1;
        let mut frames = Array2::zeros((num_frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
            let start = t * self.hop_size;
            let slice = &samples[start..start + self.fft_size];
            for ((b, &x), &w) in buf.iter_mut().zip(slice).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (out, c) in row.iter_mut().zip(&buf[..bins]) {
                *out = c.norm();
            }
        }
        Ok(Spectrogram {
            frames,
            fft_size: self.fft_size,
            hop_size: self.hop_size,
        })
    }
}

pub fn spectrogram(
    signal: &PcmSignal,
    fft_size: usize,
    hop_size: usize,
) -> Result<Spectrogram, AudioError> {
    Stft::new(fft_size, hop_size)?.process(&signal.samples)
}

/// Per-utterance scalar standardization with the default epsilon.
pub fn normalize(spec: &Spectrogram) -> NormalizedSpectrogram {
    standardize(&spec.frames, 1e-8)
}

/// `(x - mean) / max(std, epsilon)` over every cell of the matrix.
pub fn standardize(values: &Array2<f64>, epsilon: f64) -> NormalizedSpectrogram {
    let n = values.len().max(1) as f64;
    let mean = values.sum() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = std.max(epsilon);
    NormalizedSpectrogram {
        frames: values.mapv(|v| (v - mean) / scale),
        mean,
        std,
    }
}

/// Standardizes each column independently. The recorded mean/std are the
/// column averages.
pub fn standardize_per_bin(values: &Array2<f64>, epsilon: f64) -> NormalizedSpectrogram {
    let mut frames = values.clone();
    let (mut mean_acc, mut std_acc) = (0.0, 0.0);
    let rows = values.nrows().max(1) as f64;
    for mut col in frames.columns_mut() {
        let mean = col.sum() / rows;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows).sqrt();
        let scale = std.max(epsilon);
        col.mapv_inplace(|v| (v - mean) / scale);
        mean_acc += mean;
        std_acc += std;
    }
    let cols = values.ncols().max(1) as f64;
    NormalizedSpectrogram {
        frames,
        mean: mean_acc / cols,
        std: std_acc / cols,
    }
}

/// Full feature pipeline: STFT, optional log compression, standardization.
pub fn featurize(signal: &PcmSignal, cfg: &FeatureConfig) -> Result<NormalizedSpectrogram, AudioError> {
    let spec = spectrogram(signal, cfg.fft_size, cfg.hop_size)?;
    Ok(normalize_features(spec, cfg))
}

pub fn normalize_features(spec: Spectrogram, cfg: &FeatureConfig) -> NormalizedSpectrogram {
    let mut values = spec.frames;
    if cfg.log_magnitude {
        values.mapv_inplace(|v| (v + 1e-6).ln());
    }
    if cfg.per_bin_normalization {
        standardize_per_bin(&values, cfg.norm_epsilon)
    } else {
        standardize(&values, cfg.norm_epsilon)
    }
}
