//! Frozen autoregressive language model interface, the seeded toy decoder
//! and beam-search decoding over prefix embeddings.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::PrefixEmbedding;
use crate::autodiff::{log_softmax_rows, Mask, Mat, Tape, Var};
use crate::error::{MacCapError, Result};
use crate::nn::{self, TensorMap, VarMap};
use crate::tokenizer::{BOS, EOS};
use crate::vecmath::{domain, stream_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModelSpec {
    /// Embedding width `D_l`.
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_gen_len: usize,
    /// Longest input (prefix rows + context tokens) the model accepts.
    pub max_positions: usize,
    pub bos: u32,
    pub eos: u32,
    pub weights: String,
}

impl LanguageModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(MacCapError::invalid("d_model must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(MacCapError::invalid("vocab_size must be >= 2"));
        }
        if self.bos == self.eos {
            return Err(MacCapError::invalid("bos and eos must differ"));
        }
        if self.bos as usize >= self.vocab_size || self.eos as usize >= self.vocab_size {
            return Err(MacCapError::invalid("bos/eos outside the vocabulary"));
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Token ids with their decoded text (empty until decoded).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self {
            ids,
            text: String::new(),
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn spec(&self) -> &LanguageModelSpec;

    /// Records next-token logits on `tape`. The input is the prefix rows
    /// followed by `context`; row `j` of the result scores the token that
    /// follows `context[..=j]`. With `last_only`, only the final row is
    /// returned.
    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        prefix: Var,
        context: &[u32],
        last_only: bool,
    ) -> Result<Var>;

    /// SHA-256 over every weight the model holds.
    fn weights_checksum(&self) -> String;
}

fn check_prefix(spec: &LanguageModelSpec, prefix: &Mat) -> Result<()> {
    if prefix.ncols() != spec.d_model {
        return Err(MacCapError::shape(format!(
            "prefix width {} does not match d_model {}",
            prefix.ncols(),
            spec.d_model
        )));
    }
    Ok(())
}

fn check_ids(spec: &LanguageModelSpec, ids: &[u32]) -> Result<()> {
    if let Some(bad) = ids.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(MacCapError::invalid(format!(
            "token {bad} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    Ok(())
}

/// Logits for the token after `bos + generated`.
pub fn next_token_logits(
    lm: &dyn LanguageModel,
    prefix: &PrefixEmbedding,
    generated: &[u32],
) -> Result<Vec<f64>> {
    let spec = lm.spec();
    if generated.len() >= spec.max_gen_len {
        return Err(MacCapError::invalid(format!(
            "generated length {} reached max_gen_len {}",
            generated.len(),
            spec.max_gen_len
        )));
    }
    let mut context = Vec::with_capacity(generated.len() + 1);
    context.push(spec.bos);
    context.extend_from_slice(generated);
    raw_next_logits(lm, prefix, &context)
}

fn raw_next_logits(lm: &dyn LanguageModel, prefix: &PrefixEmbedding, context: &[u32]) -> Result<Vec<f64>> {
    check_prefix(lm.spec(), prefix.rows())?;
    check_ids(lm.spec(), context)?;
    let mut tape = Tape::new();
    let p = tape.constant(prefix.rows().clone());
    let logits = lm.logits_on_tape(&mut tape, p, context, true)?;
    Ok(tape.value(logits).row(0).to_vec())
}

/// Summed negative log-likelihood of `target` given the prefix variable,
/// recorded on `tape` (teacher forcing from `bos`).
pub fn sequence_nll_on_tape(
    tape: &mut Tape,
    lm: &dyn LanguageModel,
    prefix: Var,
    target: &[u32],
) -> Result<Var> {
    let spec = lm.spec();
    if target.is_empty() {
        return Err(MacCapError::invalid("target sequence is empty"));
    }
    check_prefix(spec, tape.value(prefix))?;
    check_ids(spec, target)?;
    let mut context = Vec::with_capacity(target.len());
    context.push(spec.bos);
    context.extend_from_slice(&target[..target.len() - 1]);
    let logits = lm.logits_on_tape(tape, prefix, &context, false)?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    Ok(tape.nll(logits, &targets))
}

/// `Σ_i log P(w_i | w_<i, E)`
pub fn sequence_log_prob(
    lm: &dyn LanguageModel,
    prefix: &PrefixEmbedding,
    target: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prefix.rows().clone());
    let nll = sequence_nll_on_tape(&mut tape, lm, p, target)?;
    Ok(-tape.value(nll)[[0, 0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub n_beams: usize,
    /// Maximum number of generated tokens, `eos` included.
    pub max_len: usize,
    /// Rank finished hypotheses by mean instead of summed log-probability.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            n_beams: 4,
            max_len: 20,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, `eos` excluded.
    pub ids: Vec<u32>,
    pub ended_with_eos: bool,
    /// Summed log-probability, `eos` step included.
    pub score: f64,
    /// Cumulative score after each generated token.
    pub step_scores: Vec<f64>,
}

impl Hypothesis {
    fn generated_len(&self) -> usize {
        self.ids.len() + usize::from(self.ended_with_eos)
    }

    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.score / self.generated_len().max(1) as f64
        } else {
            self.score
        }
    }

    fn full_ids(&self, eos: u32) -> Vec<u32> {
        let mut v = self.ids.clone();
        if self.ended_with_eos {
            v.push(eos);
        }
        v
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller id sequence (lower token id wins).
fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool, eos: u32) -> Ordering {
    b.rank_score(normalize)
        .total_cmp(&a.rank_score(normalize))
        .then_with(|| a.full_ids(eos).cmp(&b.full_ids(eos)))
}

pub fn beam_search(
    lm: &dyn LanguageModel,
    prefix: &PrefixEmbedding,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    beam_search_with_prompt(lm, prefix, &[], cfg)
}

/// Beam search continuing `bos + prompt`.
pub fn beam_search_with_prompt(
    lm: &dyn LanguageModel,
    prefix: &PrefixEmbedding,
    prompt: &[u32],
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    let spec = lm.spec();
    if cfg.n_beams == 0 {
        return Err(MacCapError::invalid("n_beams must be >= 1"));
    }
    if cfg.max_len == 0 {
        return Err(MacCapError::invalid("max_len must be >= 1"));
    }
    check_prefix(spec, prefix.rows())?;
    check_ids(spec, prompt)?;
    let needed = prefix.n_q() + 1 + prompt.len() + cfg.max_len - 1;
    if needed > spec.max_positions {
        return Err(MacCapError::invalid(format!(
            "prefix, prompt and generation need {needed} positions, model has {}",
            spec.max_positions
        )));
    }

    let mut context = Vec::with_capacity(1 + prompt.len() + cfg.max_len);
    context.push(spec.bos);
    context.extend_from_slice(prompt);
    let base = context.len();

    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        ended_with_eos: false,
        score: 0.0,
        step_scores: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_len {
        let mut candidates = Vec::with_capacity(live.len() * spec.vocab_size);
        for h in &live {
            context.truncate(base);
            context.extend_from_slice(&h.ids);
            let logits = raw_next_logits(lm, prefix, &context)?;
            let lp = log_softmax_rows(&Mat::from_shape_vec((1, logits.len()), logits).expect("row"));
            for (tok, &l) in lp.row(0).iter().enumerate() {
                let tok = tok as u32;
                let score = h.score + l;
                let mut step_scores = h.step_scores.clone();
                step_scores.push(score);
                let (ids, ended) = if tok == spec.eos {
                    (h.ids.clone(), true)
                } else {
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    (ids, false)
                };
                candidates.push(Hypothesis {
                    ids,
                    ended_with_eos: ended,
                    score,
                    step_scores,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, false, spec.eos));
        candidates.truncate(cfg.n_beams);

        let last_step = step + 1 == cfg.max_len;
        live.clear();
        for c in candidates {
            if c.ended_with_eos || last_step {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // Per-step log-probs are <= 0, so a live beam can never overtake a
        // finished one that already scores strictly higher.
        if !cfg.length_normalize {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done > best_live {
                break;
            }
        }
    }

    finished.sort_by(|a, b| rank(a, b, cfg.length_normalize, spec.eos));
    finished
        .into_iter()
        .next()
        .ok_or_else(|| MacCapError::NumericFailure("beam search produced no hypothesis".into()))
}

/// Configuration of the seeded toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub max_gen_len: usize,
    pub bos: u32,
    pub eos: u32,
    /// Standard deviation multiplier of the output head.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_positions: 64,
            max_gen_len: 20,
            bos: BOS,
            eos: EOS,
            logit_scale: 2.0,
            seed: 3,
        }
    }
}

/// Pre-layer-norm causal attention decoder with seeded random frozen
/// weights. Prefix rows and token embeddings share one learned-position
/// table; the output head is untied.
#[derive(Debug, Clone)]
pub struct ToyLm {
    config: ToyLmConfig,
    spec: LanguageModelSpec,
    weights: TensorMap,
}

impl ToyLm {
    pub fn new(config: ToyLmConfig) -> Result<Self> {
        let spec = LanguageModelSpec {
            d_model: config.d_model,
            vocab_size: config.vocab_size,
            max_gen_len: config.max_gen_len,
            max_positions: config.max_positions,
            bos: config.bos,
            eos: config.eos,
            weights: format!(
                "toy-lm-seed{}-l{}-h{}-s{}",
                config.seed, config.n_layers, config.n_heads, config.logit_scale
            ),
        };
        spec.validate()?;
        if config.n_heads == 0 || !config.d_model.is_multiple_of(config.n_heads) {
            return Err(MacCapError::invalid("d_model must be divisible by n_heads"));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, domain::LANGUAGE_MODEL, 0));
        let mut w = TensorMap::new();
        w.insert("tok_emb".into(), nn::normal_matrix(&mut rng, config.vocab_size, d, 1.0));
        w.insert("pos_emb".into(), nn::normal_matrix(&mut rng, config.max_positions, d, 0.3));
        for layer in 0..config.n_layers {
            let p = format!("block{layer}");
            nn::init_layer_norm(&mut w, &format!("{p}.ln1"), d);
            nn::init_attention(&mut rng, &mut w, &format!("{p}.attn"), d);
            nn::init_layer_norm(&mut w, &format!("{p}.ln2"), d);
            nn::init_mlp(&mut rng, &mut w, &format!("{p}.mlp"), d, config.ffn_mult * d, d);
        }
        nn::init_layer_norm(&mut w, "ln_f", d);
        w.insert(
            "head".into(),
            nn::normal_matrix(&mut rng, d, config.vocab_size, config.logit_scale / (d as f64).sqrt()),
        );
        Ok(Self {
            config,
            spec,
            weights: w,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn weights(&self) -> &TensorMap {
        &self.weights
    }
}

impl LanguageModel for ToyLm {
    fn spec(&self) -> &LanguageModelSpec {
        &self.spec
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        prefix: Var,
        context: &[u32],
        last_only: bool,
    ) -> Result<Var> {
        check_prefix(&self.spec, tape.value(prefix))?;
        check_ids(&self.spec, context)?;
        if context.is_empty() {
            return Err(MacCapError::invalid("context must contain at least bos"));
        }
        let n_q = tape.value(prefix).nrows();
        let n = n_q + context.len();
        if n > self.spec.max_positions {
            return Err(MacCapError::invalid(format!(
                "input of {n} positions exceeds max_positions {}",
                self.spec.max_positions
            )));
        }
        let d = self.config.d_model;
        let tok_emb = &self.weights["tok_emb"];
        let toks = Mat::from_shape_fn((context.len(), d), |(i, j)| tok_emb[[context[i] as usize, j]]);
        let toks = tape.constant(toks);
        let pos = tape.constant(
            self.weights["pos_emb"]
                .slice(ndarray::s![..n, ..])
                .to_owned(),
        );
        let x = if n_q > 0 {
            tape.concat_rows(&[prefix, toks])
        } else {
            toks
        };
        let mut x = tape.add(x, pos);

        let vars = VarMap::register(tape, &self.weights, false);
        for layer in 0..self.config.n_layers {
            let p = format!("block{layer}");
            let h = nn::layer_norm(tape, &vars, &format!("{p}.ln1"), x)?;
            let a = nn::multi_head_attention(
                tape,
                &vars,
                &format!("{p}.attn"),
                h,
                h,
                self.config.n_heads,
                Mask::Causal,
            )?;
            x = tape.add(x, a);
            let h = nn::layer_norm(tape, &vars, &format!("{p}.ln2"), x)?;
            let f = nn::mlp(tape, &vars, &format!("{p}.mlp"), h)?;
            x = tape.add(x, f);
        }
        let start = if last_only { n - 1 } else { n_q };
        let x = tape.slice_rows(x, start, n);
        let h = nn::layer_norm(tape, &vars, "ln_f", x)?;
        Ok(tape.matmul(h, vars.get("head")?))
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLm {
        ToyLm::new(ToyLmConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            max_positions: 24,
            max_gen_len: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        let mut cfg = ToyLmConfig::default();
        cfg.eos = cfg.bos;
        assert!(ToyLm::new(cfg).is_err());
        let cfg = ToyLmConfig {
            vocab_size: 1,
            bos: 0,
            eos: 0,
            ..Default::default()
        };
        assert!(ToyLm::new(cfg).is_err());
    }

    #[test]
    fn next_token_distribution_normalizes() {
        let lm = tiny();
        let prefix = PrefixEmbedding::new(Mat::from_elem((3, 8), 0.2)).unwrap();
        for generated in [vec![], vec![4], vec![4, 7, 5]] {
            let logits = next_token_logits(&lm, &prefix, &generated).unwrap();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let total: f64 = logits.iter().map(|l| (l - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_and_length_errors() {
        let lm = tiny();
        let wrong = PrefixEmbedding::new(Mat::zeros((2, 5))).unwrap();
        assert!(matches!(next_token_logits(&lm, &wrong, &[]), Err(MacCapError::Shape(_))));
        let prefix = PrefixEmbedding::new(Mat::zeros((2, 8))).unwrap();
        assert!(next_token_logits(&lm, &prefix, &[4; 8]).is_err());
        assert!(sequence_log_prob(&lm, &prefix, &[]).is_err());
        assert!(beam_search(
            &lm,
            &prefix,
            &BeamConfig {
                n_beams: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn all_positions_agree_with_last_only() {
        let lm = tiny();
        let prefix = PrefixEmbedding::new(Mat::from_elem((2, 8), -0.1)).unwrap();
        let ctx = [BOS, 5, 6, 7];
        let mut tape = Tape::new();
        let p = tape.constant(prefix.rows().clone());
        let all = lm.logits_on_tape(&mut tape, p, &ctx, false).unwrap();
        let all = tape.value(all).clone();
        for k in 1..=ctx.len() {
            let last = raw_next_logits(&lm, &prefix, &ctx[..k]).unwrap();
            for (a, b) in all.row(k - 1).iter().zip(&last) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beam_step_scores_never_increase() {
        let lm = tiny();
        let prefix = PrefixEmbedding::new(Mat::from_elem((2, 8), 0.3)).unwrap();
        let h = beam_search(
            &lm,
            &prefix,
            &BeamConfig {
                n_beams: 3,
                max_len: 6,
                length_normalize: false,
            },
        )
        .unwrap();
        assert_eq!(h.step_scores.len(), h.generated_len());
        for w in h.step_scores.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(*h.step_scores.last().unwrap(), h.score);
    }

    #[test]
    fn too_many_positions_is_rejected() {
        let lm = tiny();
        let prefix = PrefixEmbedding::new(Mat::zeros((20, 8))).unwrap();
        assert!(beam_search(&lm, &prefix, &BeamConfig::default()).is_err());
    }
}
