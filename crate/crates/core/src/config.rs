//! Run configuration: `[features]`, `[model]`, `[train]` and `[decode]`
//! TOML sections, every key optional with a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::FeatureConfig;
use crate::codec::hex;
use crate::decoder::DecoderConfig;
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecoderConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// Makes the model input width follow the feature settings.
    pub fn sync_input_bins(&mut self) {
        self.model.input_bins = self.features.num_bins();
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.model.input_bins != self.features.num_bins() {
            return Err(ConfigError::Inconsistent(format!(
                "model.input_bins {} but fft_size {} gives {} bins",
                self.model.input_bins,
                self.features.fft_size,
                self.features.num_bins()
            )));
        }
        Ok(())
    }

    /// Short hex digest of the resolved configuration, embedded in every
    /// output artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(canonical))[..16].to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.features.fft_size, 800);
        assert_eq!(c.model.gru_units, 512);
        assert_eq!(c.train.adam.learning_rate, 1e-4);
        assert_eq!(c.decode.beam_width, 100);
        c.check().unwrap();
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let text = "[features]\nfft_size = 128\nhop_size = 64\n\n[train]\nepochs = 3\nlearning_rate = 0.001\n\n[decode]\nbeam_width = 8\n";
        let mut c = Config::from_toml(text).unwrap();
        assert!(c.check().is_err());
        c.sync_input_bins();
        c.check().unwrap();
        assert_eq!(c.train.adam.learning_rate, 1e-3);
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), Config::default().hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(Config::from_toml("[extra]\n").is_err());
    }
}
