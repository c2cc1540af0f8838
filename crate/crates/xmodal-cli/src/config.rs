//! Experiment configuration: a strict TOML schema covering data
//! generation, splits, both training stages and the transfer protocol.
//! Flags override file values; the effective config is written back into
//! every output directory for provenance.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use xmodal::analysis::Direction;
use xmodal::datagen::{DatasetConfig, SplitSpec};
use xmodal::encoder::EncoderConfig;
use xmodal::rng::fnv1a64;
use xmodal::training::{ExperimentProfile, TrainConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(std::io::Error),
    Stale(String),
    Run(String),
    FailedChecks(Vec<String>),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(s) => write!(f, "config error: {s}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Stale(s) => write!(f, "stale data: {s}"),
            CliError::Run(s) => write!(f, "run failed: {s}"),
            CliError::FailedChecks(names) => {
                write!(f, "failed checks: {}", names.join(", "))
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

macro_rules! from_error {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Run(e.to_string())
            }
        }
    };
}

from_error!(xmodal::datagen::DatagenError);
from_error!(xmodal::encoder::ModelError);
from_error!(xmodal::training::TrainError);
from_error!(xmodal::analysis::AnalysisError);
from_error!(xmodal::autodiff::AutodiffError);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionConfig {
    AToB,
    BToA,
}

impl From<DirectionConfig> for Direction {
    fn from(d: DirectionConfig) -> Direction {
        match d {
            DirectionConfig::AToB => Direction::AToB,
            DirectionConfig::BToA => Direction::BToA,
        }
    }
}

/// Transfer protocol: λ grid and seeds for the ablation, plus the default
/// direction and masking switch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub direction: DirectionConfig,
    pub masking: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub source_encoder: EncoderConfig,
    pub target_encoder: EncoderConfig,
    pub source: TrainConfig,
    pub target: TrainConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let profile = ExperimentProfile::default_synthetic();
        ExperimentConfig {
            seed: 11,
            out_dir: PathBuf::from("runs/default"),
            dataset: profile.dataset,
            split: profile.split,
            source_encoder: profile.source_encoder,
            target_encoder: profile.target_encoder,
            source: profile.source_train,
            target: profile.target_train,
            transfer: TransferConfig {
                lambda_grid: vec![0.01, 0.1, 1.0, 10.0],
                seeds: vec![17, 23, 31],
                direction: DirectionConfig::AToB,
                masking: true,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.split
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.source_encoder
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.target_encoder
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.source
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.target
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.source_encoder.in_channels != self.dataset.channels_a
            && self.target_encoder.in_channels != self.dataset.channels_a
        {
            return Err(CliError::Config(format!(
                "no encoder matches modality A's {} channels",
                self.dataset.channels_a
            )));
        }
        if self.transfer.lambda_grid.is_empty() || self.transfer.seeds.is_empty() {
            return Err(CliError::Config("transfer grid and seeds must be non-empty".into()));
        }
        if self.transfer.lambda_grid.iter().any(|&l| l < 0.0) {
            return Err(CliError::Config("lambda grid values must be non-negative".into()));
        }
        if self.source.d_out != self.target.d_out {
            return Err(CliError::Config(format!(
                "source and target must share d_out ({} vs {})",
                self.source.d_out, self.target.d_out
            )));
        }
        Ok(())
    }

    /// Canonical TOML text of the effective config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the canonical encoding.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    /// Encoder geometry for the given modality.
    pub fn encoder_for(&self, modality: xmodal::datagen::Modality) -> EncoderConfig {
        match modality {
            xmodal::datagen::Modality::A => self.source_encoder.clone(),
            xmodal::datagen::Modality::B => self.target_encoder.clone(),
        }
    }
}
