//! Visual question answering by captioning the image, asking the language
//! model, and matching its free-form answer against a candidate list.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptor::PrefixEmbedding;
use crate::backbone::{ImageInput, TextEmbedding};
use crate::error::{MacCapError, Result};
use crate::inference::{CaptionPipeline, TextEncoder, EMPTY_SIMILARITY};
use crate::langmodel::{beam_search_with_prompt, BeamConfig, LanguageModel};
use crate::tokenizer::Vocab;
use crate::vecmath::cosine_similarity;

/// `"<caption> Question: <question> Answer:"`, verbatim.
pub fn build_prompt(caption: &str, question: &str) -> Result<String> {
    if caption.trim().is_empty() || question.trim().is_empty() {
        return Err(MacCapError::invalid("caption and question must be non-empty"));
    }
    Ok(format!("{caption} Question: {question} Answer:"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenAnswer {
    pub text: String,
    /// The model stopped before producing any text.
    pub empty: bool,
    /// Prompt tokens dropped from the front to fit the model's context.
    pub truncated_prompt_tokens: usize,
}

/// Continues the prompt with the language model alone (no visual prefix)
/// and cuts the answer at the first newline.
pub fn answer_open_ended(
    prompt: &str,
    lm: &dyn LanguageModel,
    vocab: &Vocab,
    beam: &BeamConfig,
) -> Result<OpenAnswer> {
    let mut ids = vocab.encode(prompt);
    let room = lm.spec().max_positions.saturating_sub(beam.max_len);
    let truncated = ids.len().saturating_sub(room);
    if truncated > 0 {
        log::warn!("prompt longer than the model context; dropping {truncated} leading tokens");
        ids.drain(..truncated);
    }
    let h = beam_search_with_prompt(lm, &PrefixEmbedding::empty(lm.spec().d_model), &ids, beam)?;
    let decoded = vocab.decode(&h.ids);
    let text = decoded.split('\n').next().unwrap_or("").trim().to_string();
    Ok(OpenAnswer {
        empty: text.is_empty(),
        text,
        truncated_prompt_tokens: truncated,
    })
}

/// Candidate embeddings, computed once and shared by every question.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub texts: Vec<String>,
    embeddings: Vec<Option<TextEmbedding>>,
}

impl CandidateSet {
    pub fn new(texts: Vec<String>, encoder: &dyn TextEncoder) -> Result<Self> {
        if texts.is_empty() {
            return Err(MacCapError::invalid("candidate list is empty"));
        }
        let embeddings = texts.par_iter().map(|t| encoder.embed(t)).collect::<Result<_>>()?;
        Ok(Self { texts, embeddings })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub text: String,
    pub similarity: f64,
}

/// Candidates by descending similarity to the generated answer, ties by
/// candidate index.
pub fn retrieve_answer(
    generated: &str,
    candidates: &CandidateSet,
    encoder: &dyn TextEncoder,
) -> Result<Vec<RankedCandidate>> {
    let g = encoder
        .embed(generated)?
        .ok_or_else(|| MacCapError::NoAnswer(format!("nothing to embed in {generated:?}")))?;
    let mut ranked = candidates
        .texts
        .iter()
        .zip(&candidates.embeddings)
        .enumerate()
        .map(|(index, (text, e))| {
            let similarity = match e {
                Some(e) => cosine_similarity(g.as_slice(), e.as_slice())?,
                None => EMPTY_SIMILARITY,
            };
            Ok(RankedCandidate {
                index,
                text: text.clone(),
                similarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// Zero-based rank of `truth` among distinct candidate strings.
pub fn answer_rank(ranked: &[RankedCandidate], truth: &str) -> Option<usize> {
    let mut seen = HashSet::new();
    for r in ranked {
        if r.text == truth {
            return Some(seen.len());
        }
        seen.insert(r.text.as_str());
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaResult {
    pub question_id: serde_json::Value,
    pub caption: String,
    pub generated_answer: String,
    pub ground_truth: String,
    /// Empty when no answer could be produced.
    pub ranked_candidates: Vec<RankedCandidate>,
    pub topk_hits: BTreeMap<usize, bool>,
}

impl VqaResult {
    pub fn new(
        question_id: serde_json::Value,
        caption: String,
        generated_answer: String,
        ground_truth: String,
        ranked_candidates: Vec<RankedCandidate>,
    ) -> Self {
        let rank = answer_rank(&ranked_candidates, &ground_truth);
        let topk_hits = [1, 5, 10]
            .into_iter()
            .map(|k| (k, rank.is_some_and(|r| r < k)))
            .collect();
        Self {
            question_id,
            caption,
            generated_answer,
            ground_truth,
            ranked_candidates,
            topk_hits,
        }
    }

    pub fn hit_at(&self, k: usize) -> bool {
        answer_rank(&self.ranked_candidates, &self.ground_truth).is_some_and(|r| r < k)
    }
}

pub fn topk_accuracy(results: &[VqaResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MacCapError::invalid("k must be >= 1"));
    }
    if results.is_empty() {
        return Err(MacCapError::invalid("no results to score"));
    }
    let hits = results.iter().filter(|r| r.hit_at(k)).count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub n_items: usize,
    pub n_no_answer: usize,
}

impl VqaReport {
    pub fn from_results(results: &[VqaResult]) -> Result<Self> {
        Ok(Self {
            top1: topk_accuracy(results, 1)?,
            top5: topk_accuracy(results, 5)?,
            top10: topk_accuracy(results, 10)?,
            n_items: results.len(),
            n_no_answer: results.iter().filter(|r| r.ranked_candidates.is_empty()).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    #[serde(default)]
    pub question_id: serde_json::Value,
    pub image_path: String,
    pub question: String,
    pub answer: String,
}

/// Reads question lines; relative image paths resolve against the file's
/// directory.
pub fn read_questions(path: &Path) -> Result<Vec<VqaItem>> {
    let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut item: VqaItem = serde_json::from_str(l)
                .map_err(|e| MacCapError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if Path::new(&item.image_path).is_relative() {
                item.image_path = base.join(&item.image_path).display().to_string();
            }
            Ok(item)
        })
        .collect()
}

/// One answer per line, blank lines skipped.
pub fn read_candidates(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(&raw);
    Ok(raw
        .lines()
        .map(|l| l.trim_end_matches('\r').trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Answers one question about `image`.
#[allow(clippy::too_many_arguments)]
pub fn answer_item(
    pipeline: &CaptionPipeline<'_>,
    image: &ImageInput,
    question_id: serde_json::Value,
    question: &str,
    ground_truth: &str,
    candidates: &CandidateSet,
    encoder: &dyn TextEncoder,
    beam: &BeamConfig,
) -> Result<VqaResult> {
    let caption = pipeline.caption(image)?.caption;
    // An empty caption still lets the model see the question.
    let context = if caption.trim().is_empty() { "image" } else { caption.as_str() };
    let prompt = build_prompt(context, question)?;
    let answer = answer_open_ended(&prompt, pipeline.lm, pipeline.vocab, beam)?;
    let ranked = match retrieve_answer(&answer.text, candidates, encoder) {
        Ok(r) => r,
        Err(MacCapError::NoAnswer(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(VqaResult::new(
        question_id,
        caption,
        answer.text,
        ground_truth.to_string(),
        ranked,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_template_is_exact() {
        assert_eq!(
            build_prompt("a dog runs", "what animal is this?").unwrap(),
            "a dog runs Question: what animal is this? Answer:"
        );
        assert_eq!(
            build_prompt("A dog.", "¿qué es?").unwrap(),
            "A dog. Question: ¿qué es? Answer:"
        );
        assert!(build_prompt("", "q").is_err());
        assert!(build_prompt("c", " ").is_err());
    }

    fn ranked(texts: &[&str]) -> Vec<RankedCandidate> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| RankedCandidate {
                index: i,
                text: t.to_string(),
                similarity: 1.0 - i as f64 * 0.1,
            })
            .collect()
    }

    #[test]
    fn rank_ignores_duplicates_above_the_truth() {
        assert_eq!(answer_rank(&ranked(&["a", "b", "b", "c"]), "c"), Some(2));
        assert_eq!(answer_rank(&ranked(&["a"]), "z"), None);
    }

    #[test]
    fn accuracy_counts_hits() {
        let r: Vec<VqaResult> = (0..10)
            .map(|i| {
                let order: Vec<&str> = if i < 4 { vec!["x", "gt"] } else { vec!["x", "y", "z", "w", "v", "gt"] };
                VqaResult::new(serde_json::Value::Null, String::new(), "x".into(), "gt".into(), ranked(&order))
            })
            .collect();
        assert_eq!(topk_accuracy(&r, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&r, 5).unwrap(), 0.4);
        assert_eq!(topk_accuracy(&r, 6).unwrap(), 1.0);
        assert!(topk_accuracy(&r, 0).is_err());
        let rep = VqaReport::from_results(&r).unwrap();
        assert_eq!((rep.top5, rep.top10, rep.n_items), (0.4, 1.0, 10));
    }
}
