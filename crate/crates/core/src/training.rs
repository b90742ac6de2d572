//! Text-only reconstruction training of the adaptor.
//!
//! Each caption embedding is expanded into a noisy region sequence, mapped
//! to a prefix by the adaptor, and scored by the frozen language model on
//! reconstructing the caption. Only adaptor weights are updated.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::{
    adaptor_gradients, inject_region_noise, AdaptorConfig, AdaptorGradients, AdaptorParams,
    NoiseConfig, PrefixEmbedding, RegionFeatureSequence,
};
use crate::backbone::{TextEmbedding, VisionLanguageBackbone};
use crate::error::{MacCapError, Result};
use crate::langmodel::{sequence_log_prob, sequence_nll_on_tape, LanguageModel};
use crate::tokenizer::Vocab;
use crate::vecmath::{domain, stream_seed, StableSum};

pub const DEFAULT_MAX_WORDS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub source_tag: String,
    pub kept: usize,
    pub dropped: usize,
    pub blank: usize,
}

/// Filtered, tokenized captions. `tokenized[i]` excludes `eos`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub captions: Vec<String>,
    pub tokenized: Vec<Vec<u32>>,
    pub stats: CorpusStats,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// SHA-256 over the token ids of every caption.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for ids in &self.tokenized {
            h.update((ids.len() as u32).to_le_bytes());
            for id in ids {
                h.update(id.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Whitespace-delimited words of the raw caption.
pub fn word_count(caption: &str) -> usize {
    caption.split_whitespace().count()
}

/// Keeps captions with at most `max_words` words and tokenizes them.
pub fn corpus_from_captions<S: AsRef<str>>(
    captions: &[S],
    max_words: usize,
    vocab: &Vocab,
    source_tag: &str,
) -> Result<TextCorpus> {
    let mut kept = Vec::new();
    let (mut dropped, mut blank) = (0, 0);
    for c in captions {
        let c = c.as_ref().trim();
        match word_count(c) {
            0 => blank += 1,
            n if n > max_words => dropped += 1,
            _ => kept.push(c.to_string()),
        }
    }
    if kept.is_empty() {
        return Err(MacCapError::InvalidCorpus(format!(
            "no captions left in {source_tag} ({dropped} over {max_words} words, {blank} blank)"
        )));
    }
    let tokenized = kept.iter().map(|c| vocab.encode(c)).collect();
    Ok(TextCorpus {
        stats: CorpusStats {
            source_tag: source_tag.to_string(),
            kept: kept.len(),
            dropped,
            blank,
        },
        captions: kept,
        tokenized,
    })
}

#[derive(Deserialize)]
struct CaptionLine {
    caption: String,
}

/// Reads one caption per line, or JSON lines with a `caption` field when
/// the first non-blank line starts with `{`. A leading BOM and CRLF line
/// endings are accepted.
pub fn read_captions(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
    let text = raw.strip_prefix('\u{feff}').unwrap_or(&raw);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let jsonl = lines
        .iter()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with('{'));
    if !jsonl {
        return Ok(lines.into_iter().map(str::to_string).collect());
    }
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<CaptionLine>(l)
                .map(|c| c.caption)
                .map_err(|e| MacCapError::InvalidCorpus(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_corpus(path: &Path, max_words: usize, vocab: &Vocab) -> Result<TextCorpus> {
    let captions = read_captions(path)?;
    corpus_from_captions(&captions, max_words, vocab, &path.display().to_string())
}

/// Caption ids followed by `eos`, the sequence the model learns to emit.
pub fn training_target(ids: &[u32], eos: u32) -> Vec<u32> {
    let mut t = ids.to_vec();
    t.push(eos);
    t
}

/// `−(1/|t|) Σ log P(w_i | w_<i, E)`
pub fn reconstruction_loss(prefix: &PrefixEmbedding, target: &[u32], lm: &dyn LanguageModel) -> Result<f64> {
    Ok(-sequence_log_prob(lm, prefix, target)? / target.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub noise: NoiseConfig,
    pub n_q: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Encode every caption once up front instead of once per visit.
    pub embedding_cache: bool,
    /// Directory for a persistent copy of the embedding cache.
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 4e-4,
            epochs: 10,
            noise: NoiseConfig::default(),
            n_q: 10,
            seed: 0,
            adam: AdamConfig::default(),
            embedding_cache: true,
            cache_dir: None,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MacCapError::invalid("batch_size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(MacCapError::invalid("learning_rate must be finite and >= 0"));
        }
        if self.n_q == 0 {
            return Err(MacCapError::invalid("n_q must be >= 1"));
        }
        if self.workers == Some(0) {
            return Err(MacCapError::invalid("workers must be >= 1"));
        }
        self.noise.validate()
    }
}

/// The four region/noise combinations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPreset {
    SingleNoNoise,
    SingleNoise,
    MultipleNoNoise,
    MultipleNoise,
}

impl TrainPreset {
    pub const ALL: [TrainPreset; 4] = [
        Self::SingleNoNoise,
        Self::SingleNoise,
        Self::MultipleNoNoise,
        Self::MultipleNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SingleNoNoise => "single-no-noise",
            Self::SingleNoise => "single-noise",
            Self::MultipleNoNoise => "multiple-no-noise",
            Self::MultipleNoise => "multiple-noise",
        }
    }

    /// Overrides `n_cr` (1 or `multiple_n_cr`) and `sigma` (0 or
    /// `noise_sigma`).
    pub fn apply(self, noise: &mut NoiseConfig, multiple_n_cr: usize, noise_sigma: f64) {
        let (multiple, noisy) = match self {
            Self::SingleNoNoise => (false, false),
            Self::SingleNoise => (false, true),
            Self::MultipleNoNoise => (true, false),
            Self::MultipleNoise => (true, true),
        };
        noise.n_cr = if multiple { multiple_n_cr } else { 1 };
        noise.sigma = if noisy { noise_sigma } else { 0.0 };
    }
}

impl FromStr for TrainPreset {
    type Err = MacCapError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| MacCapError::invalid(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-caption loss of each completed epoch.
    pub losses: Vec<f64>,
    pub config: TrainConfig,
    pub corpus_stats: CorpusStats,
    pub corpus_hash: String,
    pub wall_time_secs: f64,
    pub checkpoint: Option<String>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub lm_checksum_before: String,
    pub lm_checksum_after: String,
    /// Set when training stopped early on a non-finite loss; the returned
    /// parameters are the last finite ones.
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn frozen_weights_unchanged(&self) -> bool {
        self.backbone_checksum_before == self.backbone_checksum_after
            && self.lm_checksum_before == self.lm_checksum_after
    }
}

/// Text embeddings for every caption of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub key: String,
    pub embeddings: Vec<TextEmbedding>,
}

impl EmbeddingCache {
    pub fn key_for(corpus: &TextCorpus, backbone: &dyn VisionLanguageBackbone) -> String {
        let mut h = Sha256::new();
        h.update(corpus.hash_hex().as_bytes());
        h.update(backbone.spec().hash_hex().as_bytes());
        h.update(backbone.weights_checksum().as_bytes());
        hex::encode(h.finalize())
    }

    /// Encodes the corpus, or reads a matching copy from `dir` when one
    /// exists. A fresh encoding is written back to `dir`.
    pub fn build(corpus: &TextCorpus, backbone: &dyn VisionLanguageBackbone, dir: Option<&Path>) -> Result<Self> {
        let key = Self::key_for(corpus, backbone);
        let file = dir.map(|d| d.join(format!("text-emb-{}.json", &key[..16])));
        if let Some(f) = file.as_ref().filter(|f| f.is_file()) {
            let raw = std::fs::read_to_string(f).map_err(|e| MacCapError::io(f, e))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&raw)?;
            if rows.len() == corpus.len() {
                let embeddings = rows.into_iter().map(TextEmbedding::new).collect::<Result<_>>()?;
                log::debug!("embedding cache hit {}", f.display());
                return Ok(Self { key, embeddings });
            }
            log::warn!("ignoring stale embedding cache {}", f.display());
        }
        let embeddings = corpus
            .tokenized
            .par_iter()
            .map(|ids| backbone.encode_text(ids))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = &file {
            let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
            std::fs::create_dir_all(f.parent().expect("file in dir")).map_err(|e| MacCapError::io(f, e))?;
            std::fs::write(f, serde_json::to_vec(&rows)?).map_err(|e| MacCapError::io(f, e))?;
        }
        Ok(Self { key, embeddings })
    }
}

struct Adam {
    cfg: AdamConfig,
    m: AdaptorParams,
    v: AdaptorParams,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &AdaptorParams) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut AdaptorParams, grads: &AdaptorParams, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, p) in params.tensors_mut().iter_mut() {
            let g = grads.get(name).expect("same layout");
            let m = self.m.get_mut(name).expect("same layout");
            let v = self.v.get_mut(name).expect("same layout");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
    }
}

/// Loss and gradients for one caption under one noise draw.
pub fn sample_gradients(
    params: &AdaptorParams,
    lm: &dyn LanguageModel,
    input: &RegionFeatureSequence,
    target: &[u32],
) -> Result<AdaptorGradients> {
    let len = target.len() as f64;
    adaptor_gradients(input, params, |tape, e| {
        let nll = sequence_nll_on_tape(tape, lm, e, target)?;
        Ok(tape.scale(nll, 1.0 / len))
    })
}

pub(crate) fn run_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| MacCapError::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn initial_params(cfg: &TrainConfig, backbone: &dyn VisionLanguageBackbone, lm: &dyn LanguageModel) -> Result<AdaptorParams> {
    AdaptorParams::init(AdaptorConfig::new(
        backbone.spec().embed_dim,
        lm.spec().d_model,
        cfg.n_q,
        cfg.seed,
    ))
}

pub fn train(
    corpus: &TextCorpus,
    cfg: &TrainConfig,
    backbone: &dyn VisionLanguageBackbone,
    lm: &dyn LanguageModel,
) -> Result<(AdaptorParams, TrainReport)> {
    let params = initial_params(cfg, backbone, lm)?;
    train_from(params, corpus, cfg, backbone, lm)
}

/// Continues training `params`. Batches are evaluated in parallel and
/// reduced in sample order, and every noise draw has its own seeded stream,
/// so the result is identical for any worker count.
pub fn train_from(
    params: AdaptorParams,
    corpus: &TextCorpus,
    cfg: &TrainConfig,
    backbone: &dyn VisionLanguageBackbone,
    lm: &dyn LanguageModel,
) -> Result<(AdaptorParams, TrainReport)> {
    cfg.validate()?;
    run_pool(cfg.workers, || train_loop(params, corpus, cfg, backbone, lm))?
}

fn train_loop(
    mut params: AdaptorParams,
    corpus: &TextCorpus,
    cfg: &TrainConfig,
    backbone: &dyn VisionLanguageBackbone,
    lm: &dyn LanguageModel,
) -> Result<(AdaptorParams, TrainReport)> {
    if corpus.is_empty() {
        return Err(MacCapError::InvalidCorpus("corpus is empty".into()));
    }
    let ac = params.config();
    if ac.embed_dim != backbone.spec().embed_dim || ac.lm_dim != lm.spec().d_model {
        return Err(MacCapError::shape(format!(
            "adaptor maps {} -> {}, stack needs {} -> {}",
            ac.embed_dim,
            ac.lm_dim,
            backbone.spec().embed_dim,
            lm.spec().d_model
        )));
    }
    let start = Instant::now();
    let backbone_before = backbone.weights_checksum();
    let lm_before = lm.weights_checksum();
    let eos = lm.spec().eos;
    let targets: Vec<Vec<u32>> = corpus.tokenized.iter().map(|t| training_target(t, eos)).collect();
    let cache = if cfg.embedding_cache {
        Some(EmbeddingCache::build(corpus, backbone, cfg.cache_dir.as_deref())?)
    } else {
        None
    };

    let n = corpus.len();
    let mut adam = Adam::new(cfg.adam, &params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            domain::TRAIN_SHUFFLE,
            epoch as u64,
        )));
        let mut epoch_loss = StableSum::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<AdaptorGradients>> = batch
                .par_iter()
                .map(|&i| {
                    let emb = match &cache {
                        Some(c) => c.embeddings[i].clone(),
                        None => backbone.encode_text(&corpus.tokenized[i])?,
                    };
                    let draw = (epoch * n + i) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, domain::TRAIN_NOISE, draw));
                    let input = inject_region_noise(&emb, &cfg.noise, &mut rng)?;
                    sample_gradients(&params, lm, &input, &targets[i])
                })
                .collect();
            let mut total = params.zeros_like();
            let mut batch_losses = Vec::with_capacity(batch.len());
            for r in results {
                let g = match r {
                    Ok(g) => g,
                    Err(MacCapError::NumericFailure(msg)) => {
                        log::error!("epoch {epoch}: {msg}; keeping last finite parameters");
                        aborted = Some(format!("epoch {epoch}: {msg}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                batch_losses.push(g.loss);
                for (name, t) in total.tensors_mut().iter_mut() {
                    *t += g.grads.get(name).expect("same layout");
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in total.tensors_mut().values_mut() {
                t.mapv_inplace(|v| v * scale);
            }
            let mut next = params.clone();
            adam.step(&mut next, &total, cfg.learning_rate);
            if next.tensors().values().any(|t| t.iter().any(|v| !v.is_finite())) {
                aborted = Some(format!("epoch {epoch}: parameter update produced non-finite values"));
                break 'epochs;
            }
            params = next;
            batch_losses.into_iter().for_each(|l| epoch_loss.add(l));
        }
        let mean = epoch_loss.total() / n as f64;
        log::info!("epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        losses.push(mean);
    }

    let report = TrainReport {
        losses,
        config: cfg.clone(),
        corpus_stats: corpus.stats.clone(),
        corpus_hash: corpus.hash_hex(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
        backbone_checksum_before: backbone_before,
        backbone_checksum_after: backbone.weights_checksum(),
        lm_checksum_before: lm_before,
        lm_checksum_after: lm.weights_checksum(),
        aborted,
    };
    Ok((params, report))
}

/// Mean reconstruction loss of explicit `(input rows, caption ids)` items,
/// with `eos` appended to each target.
pub fn mean_reconstruction_loss(
    params: &AdaptorParams,
    lm: &dyn LanguageModel,
    items: &[(RegionFeatureSequence, Vec<u32>)],
) -> Result<f64> {
    if items.is_empty() {
        return Err(MacCapError::invalid("no items to score"));
    }
    let eos = lm.spec().eos;
    let losses = items
        .par_iter()
        .map(|(input, ids)| {
            let prefix = crate::adaptor::adaptor_forward(input, params)?;
            reconstruction_loss(&prefix, &training_target(ids, eos), lm)
        })
        .collect::<Result<Vec<f64>>>()?;
    let s: StableSum = losses.into_iter().collect();
    Ok(s.mean().expect("non-empty"))
}

pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let body = serde_json::to_string_pretty(report)?;
    std::fs::write(path, body).map_err(|e| MacCapError::io(path, e))
}
