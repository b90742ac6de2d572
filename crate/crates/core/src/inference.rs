//! Zero-shot captioning: pick the most attended patches, pool each one's
//! attention-weighted context, decode several noisy variants and keep the
//! caption closest to the image.

use std::cmp::Ordering;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptor::{adaptor_forward, AdaptorParams, NoiseDistribution, RegionFeatureSequence};
use crate::autodiff::Mat;
use crate::backbone::{ImageInput, PatchFeatureSet, ProjectedPatchSet, TextEmbedding, VisionLanguageBackbone};
use crate::error::{MacCapError, Result};
use crate::langmodel::{beam_search, BeamConfig, LanguageModel};
use crate::tokenizer::Vocab;
use crate::vecmath::{cosine_similarity, domain, l2_normalize, stream_seed};

/// Selected patch indices (into the vision tokens, never 0) and their
/// attention rows over all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SubregionSelection {
    pub patch_indices: Vec<usize>,
    pub attention: Mat,
}

/// Patch indices ordered by descending score, ties by ascending index.
pub fn rank_patches(cls_attention: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (1..cls_attention.len()).collect();
    idx.sort_by(|&a, &b| cls_attention[b].total_cmp(&cls_attention[a]).then(a.cmp(&b)));
    idx
}

pub fn select_informative_patches(p: &PatchFeatureSet, n_cr: usize) -> Result<SubregionSelection> {
    if n_cr == 0 || n_cr > p.n_patches() {
        return Err(MacCapError::invalid(format!(
            "n_cr must be in 1..={}, got {n_cr}",
            p.n_patches()
        )));
    }
    let attention = p
        .attention()
        .ok_or_else(|| MacCapError::invalid("patch set carries no attention matrix"))?;
    let mut patch_indices = rank_patches(p.cls_attention());
    patch_indices.truncate(n_cr);
    let attention = attention.select(ndarray::Axis(0), &patch_indices);
    Ok(SubregionSelection {
        patch_indices,
        attention,
    })
}

/// How each pooled subregion is combined with the global feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// `I_s^k + I_c`
    #[default]
    Sum,
    /// `(I_s^k + I_c) / 2`
    Mean,
}

impl FromStr for Aggregate {
    type Err = MacCapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(MacCapError::invalid(format!("unknown aggregate {other:?}"))),
        }
    }
}

/// `N_cr × D` rows built from the pooled subregions and the global row.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionImageFeature {
    pub rows: Mat,
    /// `I_s = A · I_p′`
    pub pooled: Mat,
    /// `I_c`
    pub global: Vec<f64>,
}

pub fn aggregate_subregions(
    proj: &ProjectedPatchSet,
    sel: &SubregionSelection,
    mode: Aggregate,
) -> Result<RegionImageFeature> {
    let tokens = proj.tokens();
    if sel.attention.ncols() != tokens.nrows() {
        return Err(MacCapError::shape(format!(
            "attention covers {} tokens, projection has {}",
            sel.attention.ncols(),
            tokens.nrows()
        )));
    }
    let pooled = sel.attention.dot(tokens);
    let global = proj.global();
    let mut rows = pooled.clone();
    for mut r in rows.rows_mut() {
        for (v, g) in r.iter_mut().zip(&global) {
            *v += g;
            if mode == Aggregate::Mean {
                *v *= 0.5;
            }
        }
    }
    Ok(RegionImageFeature { rows, pooled, global })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Number of noisy decodes `S`.
    pub s: usize,
    pub inference_sigma: f64,
    pub distribution: NoiseDistribution,
    /// Re-normalize rows after adding noise.
    pub normalize_inference_rows: bool,
    pub n_beams: usize,
    pub max_len: usize,
    pub length_normalize: bool,
    pub n_cr: usize,
    pub aggregate: Aggregate,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            s: 20,
            inference_sigma: 0.016,
            distribution: NoiseDistribution::Gaussian,
            normalize_inference_rows: false,
            n_beams: 4,
            max_len: 20,
            length_normalize: false,
            n_cr: 10,
            aggregate: Aggregate::Sum,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(MacCapError::invalid("s must be >= 1"));
        }
        if !self.inference_sigma.is_finite() || self.inference_sigma < 0.0 {
            return Err(MacCapError::invalid("inference_sigma must be finite and >= 0"));
        }
        if self.n_beams == 0 || self.max_len == 0 || self.n_cr == 0 {
            return Err(MacCapError::invalid("n_beams, max_len and n_cr must be >= 1"));
        }
        Ok(())
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            n_beams: self.n_beams,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub ids: Vec<u32>,
    pub text: String,
    /// Summed log-probability from beam search.
    pub lm_score: f64,
    /// Cosine similarity to the image, set by [`rerank`].
    pub similarity: Option<f64>,
}

/// The `S` noise matrices, drawn in order (sample, row, dimension) from one
/// seeded stream.
pub fn draw_inference_noise(rows: usize, dim: usize, cfg: &SamplingConfig) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, domain::INFERENCE_NOISE, 0));
    (0..cfg.s)
        .map(|_| Mat::from_shape_simple_fn((rows, dim), || cfg.distribution.sample(&mut rng, cfg.inference_sigma)))
        .collect()
}

/// Adaptor input for one noise matrix.
pub fn noisy_rows(feature: &RegionImageFeature, noise: &Mat, normalize: bool) -> Result<RegionFeatureSequence> {
    let mut rows = &feature.rows + noise;
    if normalize {
        for mut r in rows.rows_mut() {
            let n = l2_normalize(r.as_slice().expect("standard layout"))?;
            r.iter_mut().zip(n).for_each(|(v, x)| *v = x);
        }
    }
    RegionFeatureSequence::new(rows)
}

pub fn generate_candidates(
    feature: &RegionImageFeature,
    cfg: &SamplingConfig,
    adaptor: &AdaptorParams,
    lm: &dyn LanguageModel,
    vocab: &Vocab,
) -> Result<Vec<CaptionCandidate>> {
    cfg.validate()?;
    let noise = draw_inference_noise(feature.rows.nrows(), feature.rows.ncols(), cfg);
    let beam = cfg.beam();
    noise
        .par_iter()
        .map(|n| {
            let input = noisy_rows(feature, n, cfg.normalize_inference_rows)?;
            let prefix = adaptor_forward(&input, adaptor)?;
            let h = beam_search(lm, &prefix, &beam)?;
            Ok(CaptionCandidate {
                text: vocab.decode(&h.ids),
                ids: h.ids,
                lm_score: h.score,
                similarity: None,
            })
        })
        .collect()
}

/// Maps caption text into the joint space. `None` means the text has no
/// content to embed.
pub trait TextEncoder: Sync {
    fn embed(&self, text: &str) -> Result<Option<TextEmbedding>>;
}

pub struct BackboneTextEncoder<'a> {
    pub backbone: &'a dyn VisionLanguageBackbone,
    pub vocab: &'a Vocab,
}

impl TextEncoder for BackboneTextEncoder<'_> {
    fn embed(&self, text: &str) -> Result<Option<TextEmbedding>> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Ok(None);
        }
        self.backbone.encode_text(&ids).map(Some)
    }
}

/// Similarity given to candidates with nothing to embed.
pub const EMPTY_SIMILARITY: f64 = -1.0;

/// Scores every candidate and returns the index of the best one; ties go to
/// the lowest index.
pub fn rerank(
    candidates: &mut [CaptionCandidate],
    image_global: &[f64],
    encoder: &dyn TextEncoder,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(MacCapError::invalid("no candidates to rerank"));
    }
    let sims = candidates
        .par_iter()
        .map(|c| match encoder.embed(&c.text)? {
            Some(e) => cosine_similarity(e.as_slice(), image_global),
            None => Ok(EMPTY_SIMILARITY),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, (c, s)) in candidates.iter_mut().zip(&sims).enumerate() {
        c.similarity = Some(*s);
        if s.total_cmp(&sims[best]) == Ordering::Greater {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: String,
    pub similarity: f64,
    pub chosen: usize,
    pub candidates: Vec<CaptionCandidate>,
}

/// Everything needed to caption an image.
pub struct CaptionPipeline<'a> {
    pub backbone: &'a dyn VisionLanguageBackbone,
    pub lm: &'a dyn LanguageModel,
    pub vocab: &'a Vocab,
    pub adaptor: &'a AdaptorParams,
    pub sampling: SamplingConfig,
}

impl CaptionPipeline<'_> {
    /// Region rows fed to the adaptor before noise, plus the projected set.
    pub fn region_feature(&self, image: &ImageInput) -> Result<(RegionImageFeature, ProjectedPatchSet)> {
        let patches = self.backbone.encode_image_patches(image)?;
        let projected = self.backbone.project_patches(&patches)?;
        let sel = select_informative_patches(&patches, self.sampling.n_cr)?;
        let feature = aggregate_subregions(&projected, &sel, self.sampling.aggregate)?;
        Ok((feature, projected))
    }

    pub fn caption(&self, image: &ImageInput) -> Result<CaptionResult> {
        let (feature, projected) = self.region_feature(image)?;
        let mut candidates = generate_candidates(&feature, &self.sampling, self.adaptor, self.lm, self.vocab)?;
        let encoder = BackboneTextEncoder {
            backbone: self.backbone,
            vocab: self.vocab,
        };
        let chosen = rerank(&mut candidates, &projected.global(), &encoder)?;
        let best = &candidates[chosen];
        Ok(CaptionResult {
            caption: best.text.clone(),
            similarity: best.similarity.expect("set by rerank"),
            chosen,
            candidates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: serde_json::Value,
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestOutput {
    pub image_id: serde_json::Value,
    pub caption: String,
    pub similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CaptionCandidate>>,
}

/// Reads `{"image_id", "image_path"}` lines; relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut e: ManifestEntry = serde_json::from_str(l)
                .map_err(|e| MacCapError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if Path::new(&e.image_path).is_relative() {
                e.image_path = base.join(&e.image_path).display().to_string();
            }
            Ok(e)
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| MacCapError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_set(scores: Vec<f64>) -> PatchFeatureSet {
        let n = scores.len();
        let tokens = Mat::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64 + 1.0);
        let attention = Mat::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
        PatchFeatureSet::new(tokens, scores, Some(attention)).unwrap()
    }

    #[test]
    fn sorted_and_tied_scores() {
        let p = patch_set(vec![0.4, 0.3, 0.15, 0.1, 0.05]);
        assert_eq!(select_informative_patches(&p, 3).unwrap().patch_indices, vec![1, 2, 3]);
        let p = patch_set(vec![0.2; 5]);
        assert_eq!(select_informative_patches(&p, 2).unwrap().patch_indices, vec![1, 2]);
        assert!(select_informative_patches(&p, 5).is_err());
        assert!(select_informative_patches(&p, 0).is_err());
    }

    #[test]
    fn one_hot_attention_rows() {
        let tokens = Mat::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let proj = ProjectedPatchSet::new(tokens).unwrap();
        let sel = SubregionSelection {
            patch_indices: vec![2, 1],
            attention: Mat::from_shape_vec((2, 3), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(),
        };
        let f = aggregate_subregions(&proj, &sel, Aggregate::Sum).unwrap();
        assert_eq!(f.rows, Mat::from_shape_vec((2, 2), vec![6.0, 8.0, 2.0, 4.0]).unwrap());
        let m = aggregate_subregions(&proj, &sel, Aggregate::Mean).unwrap();
        assert_eq!(m.rows, Mat::from_shape_vec((2, 2), vec![3.0, 4.0, 1.0, 2.0]).unwrap());
    }

    struct Fixed(Vec<Option<Vec<f64>>>, Vec<String>);

    impl TextEncoder for Fixed {
        fn embed(&self, text: &str) -> Result<Option<TextEmbedding>> {
            let i = self.1.iter().position(|t| t == text).unwrap();
            self.0[i].as_ref().map(|v| TextEmbedding::normalized(v)).transpose()
        }
    }

    fn cand(text: &str) -> CaptionCandidate {
        CaptionCandidate {
            ids: vec![],
            text: text.into(),
            lm_score: 0.0,
            similarity: None,
        }
    }

    #[test]
    fn rerank_ties_and_empty() {
        let enc = Fixed(
            vec![None, Some(vec![1.0, 1.0]), Some(vec![1.0, 0.0]), Some(vec![1.0, 0.0])],
            vec!["".into(), "b".into(), "c".into(), "d".into()],
        );
        let mut c = vec![cand(""), cand("b"), cand("c"), cand("d")];
        assert_eq!(rerank(&mut c, &[1.0, 0.0], &enc).unwrap(), 2);
        assert_eq!(c[0].similarity, Some(EMPTY_SIMILARITY));
        assert!(rerank(&mut [], &[1.0], &enc).is_err());
    }

    #[test]
    fn noise_stream_is_reproducible() {
        let cfg = SamplingConfig {
            s: 3,
            seed: 5,
            ..Default::default()
        };
        let a = draw_inference_noise(2, 4, &cfg);
        assert_eq!(a, draw_inference_noise(2, 4, &cfg));
        assert_eq!(a.len(), 3);
        assert_ne!(a[0], a[1]);
    }
}
