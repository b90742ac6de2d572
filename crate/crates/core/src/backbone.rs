//! Contrastive vision-language encoder abstraction and the seeded toy
//! backbone used for offline work.
//!
//! # Toy backbone rules
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(stream_seed(..))`
//! (see [`crate::vecmath::stream_seed`]) and `rand_distr::StandardNormal`.
//!
//! * **Text.** Token `id` owns the vector of `D` standard-normal draws taken
//!   from the stream `stream_seed(seed, TEXT_TOKEN, id)`. A token sequence is
//!   truncated to `max_text_len`, its token vectors are summed in order and
//!   the sum is L2-normalized.
//! * **Synthetic images.** A [`SyntheticImage`] describes a caption's image.
//!   With `u` the text embedding of its tokens and a stream seeded by
//!   `stream_seed(image.seed, SYNTHETIC_IMAGE, 0)`, the encoder draws `D`
//!   normals `z_0` for the class token, then `D` normals `z_k` for each patch
//!   `k = 1..=N_p`, then `N_p + 1` uniforms `U_j`. Row 0 is
//!   `normalize(u + gap_sigma·z_0)`, row `k` is
//!   `normalize(u + sigma_k·z_k)` where `sigma_1 = low_noise_sigma` when set
//!   and `patch_noise_sigma` otherwise. The class-token attention row is
//!   `e_j / Σe` with `e_j = -ln(1 - U_j)`.
//! * **Pixels.** The image is cut into a `sqrt(N_p) × sqrt(N_p)` grid of
//!   patches, each flattened (channel-major, pixel values centred by -0.5)
//!   and multiplied by a `(C·P·P) × D_v` matrix of normals from the stream
//!   `stream_seed(seed, PIXEL_PROJECTION, 0)` scaled by `1/sqrt(C·P·P)`.
//!   The class token is the mean patch row.
//! * **Attention.** Except for the synthetic class-token row, attention row
//!   `i` is the head average of `softmax_j(sharpness · <x_i^h, x_j^h> /
//!   sqrt(d_h))` where `x^h` is the head-`h` column block of the tokens.
//! * **Projection.** The toy backbone uses `D_v = D` and the identity map.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_rows, Mask, Mat};
use crate::error::{MacCapError, Result};
use crate::synth::synthetic_caption;
use crate::tokenizer::Vocab;
use crate::vecmath::{domain, l2_norm, l2_normalize, stream_seed, UNIT_NORM_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Joint embedding dimensionality `D`.
    pub embed_dim: usize,
    /// Vision encoder width `D_v`.
    pub vision_dim: usize,
    /// Patches per image `N_p`.
    pub n_patches: usize,
    /// Size of the text token inventory.
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Identifies the weights behind this spec (seed, vocabulary hash, ...).
    pub weights: String,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.vision_dim == 0 || self.n_patches == 0 {
            return Err(MacCapError::invalid(format!(
                "backbone dims must be >= 1 (D={}, D_v={}, N_p={})",
                self.embed_dim, self.vision_dim, self.n_patches
            )));
        }
        if self.max_text_len == 0 || self.vocab_size == 0 {
            return Err(MacCapError::invalid("empty text vocabulary or context"));
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Unit-norm text feature in the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    /// Wraps an already-normalized vector.
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&vector);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(MacCapError::invalid(format!(
                "text embedding must have unit norm, got {n}"
            )));
        }
        Ok(Self(vector))
    }

    pub fn normalized(vector: &[f64]) -> Result<Self> {
        Ok(Self(l2_normalize(vector)?))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for TextEmbedding {
    type Error = MacCapError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TextEmbedding> for Vec<f64> {
    fn from(t: TextEmbedding) -> Self {
        t.0
    }
}

/// Final-layer vision tokens. Row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    tokens: Mat,
    cls_attention: Vec<f64>,
    /// Full head-averaged attention matrix, `(N_p+1) × (N_p+1)`, when the
    /// producer exposes it. Row 0 equals `cls_attention`.
    attention: Option<Mat>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MacCapError::invalid(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > UNIT_NORM_TOL {
        return Err(MacCapError::invalid(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

impl PatchFeatureSet {
    pub fn new(tokens: Mat, cls_attention: Vec<f64>, attention: Option<Mat>) -> Result<Self> {
        let n = tokens.nrows();
        if n < 2 {
            return Err(MacCapError::shape("need a class token and at least one patch"));
        }
        if cls_attention.len() != n {
            return Err(MacCapError::shape(format!(
                "cls_attention has {} entries for {n} tokens",
                cls_attention.len()
            )));
        }
        check_distribution(&cls_attention, "cls_attention")?;
        if let Some(a) = &attention {
            if a.dim() != (n, n) {
                return Err(MacCapError::shape(format!(
                    "attention matrix is {:?}, expected ({n}, {n})",
                    a.dim()
                )));
            }
            for (i, row) in a.rows().into_iter().enumerate() {
                check_distribution(&row.to_vec(), &format!("attention row {i}"))?;
            }
        }
        Ok(Self {
            tokens,
            cls_attention,
            attention,
        })
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn cls_attention(&self) -> &[f64] {
        &self.cls_attention
    }

    pub fn attention(&self) -> Option<&Mat> {
        self.attention.as_ref()
    }

    /// `N_p`
    pub fn n_patches(&self) -> usize {
        self.tokens.nrows() - 1
    }
}

/// Vision tokens mapped into the joint space. Row 0 is the global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPatchSet {
    tokens: Mat,
}

impl ProjectedPatchSet {
    /// `tokens` holds the global row followed by at least one patch row.
    pub fn new(tokens: Mat) -> Result<Self> {
        if tokens.nrows() < 2 || tokens.ncols() == 0 {
            return Err(MacCapError::shape(format!(
                "projected set needs >= 2 rows and >= 1 column, got {:?}",
                tokens.dim()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(MacCapError::invalid("projected tokens must be finite"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    /// Global image feature `I_c`.
    pub fn global(&self) -> Vec<f64> {
        self.tokens.row(0).to_vec()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.tokens.row(i).to_vec()
    }

    pub fn n_patches(&self) -> usize {
        self.tokens.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Shared `D_v → D` linear map, stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: Mat,
}

impl Linear {
    pub fn new(weight: Mat) -> Result<Self> {
        if weight.is_empty() {
            return Err(MacCapError::shape("empty projection weight"));
        }
        Ok(Self { weight })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    /// `rows · Wᵀ`
    pub fn apply(&self, rows: &Mat) -> Result<Mat> {
        if rows.ncols() != self.in_dim() {
            return Err(MacCapError::shape(format!(
                "projection expects width {}, got {}",
                self.in_dim(),
                rows.ncols()
            )));
        }
        Ok(rows.dot(&self.weight.t()))
    }

    pub fn project(&self, p: &PatchFeatureSet) -> Result<ProjectedPatchSet> {
        Ok(ProjectedPatchSet {
            tokens: self.apply(p.tokens())?,
        })
    }
}

/// Pixel image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    /// Loads an image file and resizes it to `size × size` RGB.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| MacCapError::Format(format!("{}: {e}", path.display())))?;
        let rgb = img
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let mut data = vec![0f32; 3 * size * size];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * size * size + y as usize * size + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self {
            channels: 3,
            height: size,
            width: size,
            data,
        })
    }
}

/// Descriptor of a synthetic image depicting a caption; see the module docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub tokens: Vec<u32>,
    pub seed: u64,
    pub gap_sigma: f64,
    pub patch_noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Pixels(ImageTensor),
    Synthetic(SyntheticImage),
}

impl ImageInput {
    /// A `.json` file holds a [`SyntheticImage`] descriptor; anything else
    /// is decoded as a picture and resized to `size × size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
            let img = serde_json::from_str(&raw)
                .map_err(|e| MacCapError::Format(format!("{}: {e}", path.display())))?;
            return Ok(Self::Synthetic(img));
        }
        if !path.is_file() {
            return Err(MacCapError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
            ));
        }
        ImageTensor::load(path, size).map(Self::Pixels)
    }
}

pub trait VisionLanguageBackbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn encode_text(&self, tokens: &[u32]) -> Result<TextEmbedding>;

    fn encode_image_patches(&self, image: &ImageInput) -> Result<PatchFeatureSet>;

    fn projection(&self) -> &Linear;

    fn project_patches(&self, p: &PatchFeatureSet) -> Result<ProjectedPatchSet> {
        self.projection().project(p)
    }

    /// SHA-256 over every weight the backbone holds.
    fn weights_checksum(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub embed_dim: usize,
    pub n_patches: usize,
    pub max_text_len: usize,
    pub seed: u64,
    pub image_size: usize,
    pub attention_heads: usize,
    pub attention_sharpness: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_patches: 49,
            max_text_len: 32,
            seed: 7,
            image_size: 56,
            attention_heads: 4,
            attention_sharpness: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyBackboneConfig,
    spec: BackboneSpec,
    token_table: Mat,
    pixel_projection: Option<Mat>,
    projection: Linear,
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl ToyBackbone {
    pub fn new(config: ToyBackboneConfig, vocab: &Vocab) -> Result<Self> {
        let d = config.embed_dim;
        if config.attention_heads == 0 || !d.is_multiple_of(config.attention_heads) {
            return Err(MacCapError::invalid(format!(
                "embed_dim {d} not divisible by {} attention heads",
                config.attention_heads
            )));
        }
        let spec = BackboneSpec {
            embed_dim: d,
            vision_dim: d,
            n_patches: config.n_patches,
            vocab_size: vocab.len(),
            max_text_len: config.max_text_len,
            weights: format!("toy-seed{}-vocab{}", config.seed, &vocab.hash_hex()[..16]),
        };
        spec.validate()?;

        let mut token_table = Mat::zeros((vocab.len(), d));
        for id in 0..vocab.len() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(config.seed, domain::TEXT_TOKEN, id as u64));
            for (j, v) in normal_vector(&mut rng, d).into_iter().enumerate() {
                token_table[[id, j]] = v;
            }
        }

        let grid = (config.n_patches as f64).sqrt().round() as usize;
        let pixel_projection = (grid * grid == config.n_patches
            && config.image_size.is_multiple_of(grid)
            && config.image_size > 0)
            .then(|| {
                let patch = config.image_size / grid;
                let fan_in = 3 * patch * patch;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    config.seed,
                    domain::PIXEL_PROJECTION,
                    0,
                ));
                let scale = 1.0 / (fan_in as f64).sqrt();
                Mat::from_shape_fn((fan_in, d), |_| rng.sample::<f64, _>(StandardNormal) * scale)
            });

        Ok(Self {
            projection: Linear::identity(d),
            config,
            spec,
            token_table,
            pixel_projection,
        })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    /// Head-averaged self-similarity attention over all tokens.
    fn attention_matrix(&self, tokens: &Mat) -> Mat {
        let heads = self.config.attention_heads;
        let dh = tokens.ncols() / heads;
        let n = tokens.nrows();
        let mut avg = Mat::zeros((n, n));
        for h in 0..heads {
            let block = tokens.slice(s![.., h * dh..(h + 1) * dh]);
            let scores =
                block.dot(&block.t()) * (self.config.attention_sharpness / (dh as f64).sqrt());
            avg += &softmax_rows(&scores, Mask::None);
        }
        avg / heads as f64
    }

    /// Pre-normalization class-token gap `gap_sigma · z_0` of a synthetic image.
    pub fn synthetic_global_gap(&self, image: &SyntheticImage) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(image.seed, domain::SYNTHETIC_IMAGE, 0));
        normal_vector(&mut rng, self.spec.embed_dim)
            .into_iter()
            .map(|z| image.gap_sigma * z)
            .collect()
    }

    fn encode_synthetic(&self, image: &SyntheticImage) -> Result<PatchFeatureSet> {
        for (name, v) in [
            ("gap_sigma", Some(image.gap_sigma)),
            ("patch_noise_sigma", Some(image.patch_noise_sigma)),
            ("low_noise_sigma", image.low_noise_sigma),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(MacCapError::invalid(format!("{name} must be finite and >= 0")));
                }
            }
        }
        let d = self.spec.embed_dim;
        let np = self.spec.n_patches;
        let u = self.encode_text(&image.tokens)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(image.seed, domain::SYNTHETIC_IMAGE, 0));
        let mut tokens = Mat::zeros((np + 1, d));
        for k in 0..=np {
            let sigma = match k {
                0 => image.gap_sigma,
                1 => image.low_noise_sigma.unwrap_or(image.patch_noise_sigma),
                _ => image.patch_noise_sigma,
            };
            let z = normal_vector(&mut rng, d);
            let raw: Vec<f64> = u.as_slice().iter().zip(&z).map(|(a, b)| a + sigma * b).collect();
            for (j, v) in l2_normalize(&raw)?.into_iter().enumerate() {
                tokens[[k, j]] = v;
            }
        }
        let e: Vec<f64> = (0..=np)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = e.iter().sum();
        let cls: Vec<f64> = e.iter().map(|x| x / total).collect();

        let mut attention = self.attention_matrix(&tokens);
        for (j, v) in cls.iter().enumerate() {
            attention[[0, j]] = *v;
        }
        PatchFeatureSet::new(tokens, cls, Some(attention))
    }

    fn encode_pixels(&self, image: &ImageTensor) -> Result<PatchFeatureSet> {
        let proj = self.pixel_projection.as_ref().ok_or_else(|| {
            MacCapError::invalid("pixel input needs a square patch grid dividing the image size")
        })?;
        let size = self.config.image_size;
        if image.channels != 3 || image.height != size || image.width != size {
            return Err(MacCapError::shape(format!(
                "image is {}x{}x{}, expected 3x{size}x{size}",
                image.channels, image.height, image.width
            )));
        }
        if image.data.len() != 3 * size * size {
            return Err(MacCapError::shape("image buffer length does not match its shape"));
        }
        let grid = (self.spec.n_patches as f64).sqrt().round() as usize;
        let p = size / grid;
        let mut flat = Mat::zeros((self.spec.n_patches, 3 * p * p));
        for gy in 0..grid {
            for gx in 0..grid {
                let row = gy * grid + gx;
                let mut col = 0;
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            let idx = c * size * size + (gy * p + y) * size + gx * p + x;
                            flat[[row, col]] = image.data[idx] as f64 - 0.5;
                            col += 1;
                        }
                    }
                }
            }
        }
        let patches = flat.dot(proj);
        let d = self.spec.vision_dim;
        let mut tokens = Mat::zeros((self.spec.n_patches + 1, d));
        tokens
            .row_mut(0)
            .assign(&patches.mean_axis(ndarray::Axis(0)).expect("non-empty"));
        tokens.slice_mut(s![1.., ..]).assign(&patches);
        let attention = self.attention_matrix(&tokens);
        let cls = attention.row(0).to_vec();
        PatchFeatureSet::new(tokens, cls, Some(attention))
    }
}

impl VisionLanguageBackbone for ToyBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Err(MacCapError::invalid("cannot encode an empty token sequence"));
        }
        let used = if tokens.len() > self.spec.max_text_len {
            log::warn!(
                "text of {} tokens truncated to {}",
                tokens.len(),
                self.spec.max_text_len
            );
            &tokens[..self.spec.max_text_len]
        } else {
            tokens
        };
        let mut sum = vec![0.0; self.spec.embed_dim];
        for &id in used {
            if id as usize >= self.spec.vocab_size {
                return Err(MacCapError::invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            for (s, v) in sum.iter_mut().zip(self.token_table.row(id as usize)) {
                *s += v;
            }
        }
        TextEmbedding::normalized(&sum)
    }

    fn encode_image_patches(&self, image: &ImageInput) -> Result<PatchFeatureSet> {
        match image {
            ImageInput::Pixels(t) => self.encode_pixels(t),
            ImageInput::Synthetic(s) => self.encode_synthetic(s),
        }
    }

    fn projection(&self) -> &Linear {
        &self.projection
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in [Some(&self.token_table), self.pixel_projection.as_ref(), Some(self.projection.weight())]
            .into_iter()
            .flatten()
        {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairConfig {
    pub gap_sigma: f64,
    pub patch_noise_sigma: f64,
    /// When set, patch 1 of every image uses this noise level instead.
    #[serde(default)]
    pub low_noise_sigma: Option<f64>,
    pub seed: u64,
    pub n_pairs: usize,
}

impl SyntheticPairConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gap_sigma", Some(self.gap_sigma)),
            ("patch_noise_sigma", Some(self.patch_noise_sigma)),
            ("low_noise_sigma", self.low_noise_sigma),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(MacCapError::invalid(format!("{name} must be finite and >= 0")));
                }
            }
        }
        if self.n_pairs == 0 {
            return Err(MacCapError::invalid("n_pairs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub caption: String,
    pub tokens: Vec<u32>,
    pub text: TextEmbedding,
    pub image: SyntheticImage,
    pub patches: PatchFeatureSet,
}

/// Image `index` of a synthetic pair set.
pub fn synthetic_image(cfg: &SyntheticPairConfig, tokens: Vec<u32>, index: u64) -> SyntheticImage {
    SyntheticImage {
        tokens,
        seed: stream_seed(cfg.seed, domain::SYNTHETIC_IMAGE, index),
        gap_sigma: cfg.gap_sigma,
        patch_noise_sigma: cfg.patch_noise_sigma,
        low_noise_sigma: cfg.low_noise_sigma,
    }
}

/// Paired (caption, text embedding, image patches) drawn from the toy
/// grammar; caption `i` is [`synthetic_caption`]`(cfg.seed, i)`.
pub fn generate_synthetic_pairs(
    backbone: &ToyBackbone,
    vocab: &Vocab,
    cfg: &SyntheticPairConfig,
) -> Result<Vec<SyntheticPair>> {
    cfg.validate()?;
    (0..cfg.n_pairs as u64)
        .map(|i| {
            let caption = synthetic_caption(cfg.seed, i);
            let tokens = vocab.encode(&caption);
            let text = backbone.encode_text(&tokens)?;
            let image = synthetic_image(cfg, tokens.clone(), i);
            let patches = backbone.encode_image_patches(&ImageInput::Synthetic(image.clone()))?;
            Ok(SyntheticPair {
                caption,
                tokens,
                text,
                image,
                patches,
            })
        })
        .collect()
}

/// One line of the fixture dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub text_tokens: Vec<u32>,
    pub text_emb: Vec<f64>,
    pub patch_tokens: Vec<Vec<f64>>,
    pub cls_attention: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

fn rows_to_vecs(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecs_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(MacCapError::shape("ragged matrix rows"));
    }
    Mat::from_shape_vec((n, d), rows.concat()).map_err(|e| MacCapError::shape(e.to_string()))
}

impl FixtureRecord {
    pub fn from_parts(tokens: &[u32], text: &TextEmbedding, patches: &PatchFeatureSet) -> Self {
        Self {
            text_tokens: tokens.to_vec(),
            text_emb: text.as_slice().to_vec(),
            patch_tokens: rows_to_vecs(patches.tokens()),
            cls_attention: patches.cls_attention().to_vec(),
            attention: patches.attention().map(rows_to_vecs),
        }
    }

    pub fn text(&self) -> Result<TextEmbedding> {
        TextEmbedding::new(self.text_emb.clone())
    }

    pub fn patches(&self) -> Result<PatchFeatureSet> {
        let attention = self.attention.as_deref().map(vecs_to_mat).transpose()?;
        PatchFeatureSet::new(
            vecs_to_mat(&self.patch_tokens)?,
            self.cls_attention.clone(),
            attention,
        )
    }
}

pub fn write_fixture_jsonl(path: &Path, records: &[FixtureRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| MacCapError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| MacCapError::io(path, e))?;
    }
    w.flush().map_err(|e| MacCapError::io(path, e))
}

pub fn read_fixture_jsonl(path: &Path) -> Result<Vec<FixtureRecord>> {
    let file = std::fs::File::open(path).map_err(|e| MacCapError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MacCapError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| {
            MacCapError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads a `D × D_v` projection saved as `{"weight": [[...], ...]}`.
pub fn read_projection_json(path: &Path) -> Result<Linear> {
    #[derive(Deserialize)]
    struct File {
        weight: Vec<Vec<f64>>,
    }
    let s = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
    let f: File = serde_json::from_str(&s)?;
    Linear::new(vecs_to_mat(&f.weight)?)
}

/// Precomputed real-encoder features, located through `MACCAP_ASSET_DIR`.
///
/// The directory holds `pairs.jsonl` in the fixture format and
/// `visual_projection.json`. Pretrained encoders are run outside this crate.
pub mod assets {
    use std::path::PathBuf;

    use super::*;

    pub const ENV_VAR: &str = "MACCAP_ASSET_DIR";
    pub const PAIRS_FILE: &str = "pairs.jsonl";
    pub const PROJECTION_FILE: &str = "visual_projection.json";

    pub fn asset_dir() -> Option<PathBuf> {
        std::env::var_os(ENV_VAR).map(PathBuf::from).filter(|p| p.is_dir())
    }

    /// `(text, projected patches)` pairs from a feature dump.
    pub fn load_projected_pairs(dir: &Path) -> Result<Vec<(TextEmbedding, ProjectedPatchSet)>> {
        let pairs = dir.join(PAIRS_FILE);
        let proj = dir.join(PROJECTION_FILE);
        if !pairs.is_file() || !proj.is_file() {
            return Err(MacCapError::BackendUnavailable(format!(
                "expected {} and {} in {}",
                PAIRS_FILE,
                PROJECTION_FILE,
                dir.display()
            )));
        }
        let projection = read_projection_json(&proj)?;
        read_fixture_jsonl(&pairs)?
            .iter()
            .map(|r| Ok((r.text()?, projection.project(&r.patches()?)?)))
            .collect()
    }
}
