//! Resolved run configuration shared by every command.
//!
//! Values come from built-in defaults, then an optional TOML file, then
//! command-line flags. The resolved result is written to each output
//! directory as `run_config.toml` and can be passed back with `--config`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ToyBackboneConfig;
use crate::error::{MacCapError, Result};
use crate::gap_analysis::{HistogramConfig, MixStrategy};
use crate::inference::SamplingConfig;
use crate::langmodel::ToyLmConfig;
use crate::metrics::CiderConfig;
use crate::training::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Toy,
    Real,
}

impl FromStr for Backend {
    type Err = MacCapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "real" => Ok(Self::Real),
            other => Err(MacCapError::invalid(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Captioning manifest, `{"image_id", "image_path"}` per line.
    pub images: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    /// Metric input, `{"candidate", "references"}` per line.
    pub eval_input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub pairs: usize,
    pub gap_sigma: f64,
    pub patch_noise_sigma: f64,
    pub low_noise_sigma: Option<f64>,
    pub mix: MixStrategy,
    pub histogram: HistogramConfig,
    pub plot: bool,
    pub scatter: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            gap_sigma: 0.05,
            patch_noise_sigma: 0.1,
            low_noise_sigma: None,
            mix: MixStrategy::BestPatch,
            histogram: HistogramConfig::default(),
            plot: false,
            scatter: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    #[default]
    Sigma,
    Patches,
    Presets,
}

impl FromStr for Sweep {
    type Err = MacCapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "patches" => Ok(Self::Patches),
            "presets" => Ok(Self::Presets),
            other => Err(MacCapError::invalid(format!("unknown sweep {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub sweep: Sweep,
    /// Grid values; empty means the sweep's default grid.
    pub values: Vec<f64>,
    pub corpus_size: usize,
    pub eval_images: usize,
    pub epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sweep: Sweep::Sigma,
            values: Vec::new(),
            corpus_size: 512,
            eval_images: 32,
            epochs: 5,
        }
    }
}

impl AblationConfig {
    pub fn grid(&self) -> Vec<f64> {
        if !self.values.is_empty() {
            return self.values.clone();
        }
        match self.sweep {
            Sweep::Sigma => vec![0.0, 0.016, 0.1],
            Sweep::Patches => vec![1.0, 10.0, 49.0],
            Sweep::Presets => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub captions: usize,
    pub images: usize,
    pub gap_sigma: f64,
    pub patch_noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            captions: 512,
            images: 16,
            gap_sigma: 0.0,
            patch_noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: Backend,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub backbone: ToyBackboneConfig,
    pub lm: ToyLmConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub analysis: AnalysisConfig,
    pub ablation: AblationConfig,
    pub synth: SynthConfig,
    pub cider: CiderConfig,
    /// Maximum words per training caption.
    pub max_words: usize,
    /// Keep every decoded candidate in caption outputs.
    pub with_candidates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            seed: 0,
            workers: None,
            out_dir: PathBuf::from("out"),
            paths: Paths::default(),
            backbone: ToyBackboneConfig::default(),
            lm: ToyLmConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
            synth: SynthConfig::default(),
            cider: CiderConfig::default(),
            max_words: crate::training::DEFAULT_MAX_WORDS,
            with_candidates: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MacCapError::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MacCapError::Format(format!("config: {e}")))
    }

    /// Pushes the run-wide seed and worker count into the sections that use
    /// them.
    pub fn propagate(&mut self) {
        self.train.seed = self.seed;
        self.sampling.seed = self.seed;
        self.train.workers = self.workers;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampling.validate()?;
        self.analysis.histogram.validate()?;
        if self.workers == Some(0) {
            return Err(MacCapError::invalid("workers must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash_hex(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| MacCapError::io(&path, e))?;
        Ok(path)
    }
}
