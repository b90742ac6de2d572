//! The frozen components a run works with, built from a [`RunConfig`].

use std::path::{Path, PathBuf};

use crate::backbone::{ToyBackbone, VisionLanguageBackbone};
use crate::checkpoint::Compatibility;
use crate::config::{Backend, RunConfig};
use crate::error::{MacCapError, Result};
use crate::langmodel::{LanguageModel, ToyLm};
use crate::synth::toy_vocab;
use crate::tokenizer::Vocab;

pub const VOCAB_FILE: &str = "vocab.json";

/// Toy backbone, toy language model and their shared vocabulary.
#[derive(Debug, Clone)]
pub struct ToyStack {
    pub vocab: Vocab,
    pub backbone: ToyBackbone,
    pub lm: ToyLm,
}

impl ToyStack {
    pub fn new(cfg: &RunConfig, vocab: Vocab) -> Result<Self> {
        if vocab.len() != cfg.lm.vocab_size {
            return Err(MacCapError::invalid(format!(
                "vocabulary has {} entries, language model expects {}",
                vocab.len(),
                cfg.lm.vocab_size
            )));
        }
        Ok(Self {
            backbone: ToyBackbone::new(cfg.backbone.clone(), &vocab)?,
            lm: ToyLm::new(cfg.lm.clone())?,
            vocab,
        })
    }

    /// Uses the configured vocabulary file, else one stored next to the
    /// checkpoint, else the built-in toy vocabulary.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.backend == Backend::Real {
            return Err(MacCapError::BackendUnavailable(
                "pretrained weights are not bundled; the real backend only supports `analyze` \
                 on feature dumps found through MACCAP_ASSET_DIR"
                    .into(),
            ));
        }
        let vocab = match vocab_path(cfg) {
            Some(p) => Vocab::load(&p)?,
            None => toy_vocab(cfg.lm.vocab_size)?,
        };
        Self::new(cfg, vocab)
    }

    pub fn compatibility(&self) -> Compatibility {
        compatibility(&self.backbone, &self.lm, &self.vocab)
    }
}

fn vocab_path(cfg: &RunConfig) -> Option<PathBuf> {
    if let Some(p) = &cfg.paths.vocab {
        return Some(p.clone());
    }
    let beside = cfg.paths.checkpoint.as_deref()?.parent()?.join(VOCAB_FILE);
    beside.is_file().then_some(beside)
}

pub fn compatibility(backbone: &dyn VisionLanguageBackbone, lm: &dyn LanguageModel, vocab: &Vocab) -> Compatibility {
    Compatibility {
        backbone_hash: backbone.spec().hash_hex(),
        lm_hash: lm.spec().hash_hex(),
        vocab_hash: vocab.hash_hex(),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MacCapError::io(dir, e))
}
