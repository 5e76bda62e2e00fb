use std::path::{Path, PathBuf};

use dal_core::data::DatasetKind;
use dal_core::presets::Preset;
use dal_core::train::QSurrogate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub per_class: usize,
    pub noise_amplitude: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("data"),
            kind: DatasetKind::FrozenCam,
            height: 64,
            width: 64,
            frames: 16,
            per_class: 50,
            noise_amplitude: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    /// Held-out set scored after training.
    pub test_manifest: Option<PathBuf>,
    pub preset: Preset,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fixed base sparsity factor; when absent, presets with a sparsity
    /// penalty calibrate it from `sparsity_ratio`.
    pub base_lambda: Option<f64>,
    pub sparsity_ratio: f64,
    pub q_lr_scale: f64,
    pub surrogate: QSurrogate,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("model"),
            manifest: None,
            test_manifest: None,
            preset: Preset::Temporal,
            epochs: 60,
            lr: 0.2,
            batch_size: 10,
            base_lambda: None,
            sparsity_ratio: 0.03,
            q_lr_scale: 0.01,
            surrogate: QSurrogate::Reciprocal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    /// A single DSEQ file to run.
    pub sequence: Option<PathBuf>,
    /// Every sequence of a manifest; used when `sequence` is absent.
    pub manifest: Option<PathBuf>,
    /// Scales every q of the compared sessions; a negative control.
    pub perturb_delta_q: Option<f32>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("verify"),
            model: None,
            sequence: None,
            manifest: None,
            perturb_delta_q: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub divisors: Vec<usize>,
    pub state_bits: u32,
    pub weight_bits: u32,
    pub state_words: u32,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("report"),
            model: None,
            manifest: None,
            divisors: vec![1, 2, 4],
            state_bits: 16,
            weight_bits: 8,
            state_words: 2,
        }
    }
}

/// The file's settings, or the defaults without a file.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("`{name}` is required (config file or --{})", name.replace('_', "-"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_fields_take_defaults() {
        let c: TrainCmdConfig = serde_json::from_str(r#"{"preset": "baseline", "epochs": 3}"#).unwrap();
        assert_eq!(c.preset, Preset::Baseline);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr, TrainCmdConfig::default().lr);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ReportConfig>(r#"{"divisor": [1]}"#).is_err());
    }

    #[test]
    fn dataset_kind_spelling() {
        let c: GenDataConfig = serde_json::from_str(r#"{"kind": "moving-cam"}"#).unwrap();
        assert_eq!(c.kind, DatasetKind::MovingCam);
    }
}
