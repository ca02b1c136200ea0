//! Speech recognition for diacritized Arabic recitation: spectrogram
//! features, a convolutional + bidirectional GRU encoder trained with CTC,
//! greedy and prefix beam search decoding, and WER/CER error analysis.

pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod ctc;
pub mod decoder;
pub mod ingest;
pub mod metrics;
pub mod network;
pub mod trainer;
