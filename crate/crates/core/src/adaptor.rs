//! Region noise injection and the adaptor decoder that maps joint-space
//! feature sequences to language-model prefix embeddings.
//!
//! Forward pass, with pre-layer-norm residual blocks:
//!
//! ```text
//! Q  = Q + SelfAttn(LN(Q))
//! Q  = Q + CrossAttn(LN(Q), X)      X = region rows, keys and values
//! Q' = Q + FFN(LN(Q))
//! E  = MLP(Q')                      D → max(D, D_l) → D_l
//! ```
//!
//! No positional information is attached to `X`, so the map is invariant to
//! the order of its rows. Rows are put in a canonical order before attention
//! so that the invariance also holds bit-for-bit.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Mat, Tape, Var};
use crate::backbone::TextEmbedding;
use crate::error::{MacCapError, Result};
use crate::nn::{self, TensorMap, VarMap};
use crate::vecmath::{domain, l2_normalize, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    /// Zero-mean uniform with standard deviation `sigma`.
    Uniform,
}

impl std::str::FromStr for NoiseDistribution {
    type Err = MacCapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(MacCapError::invalid(format!("unknown distribution {other:?}"))),
        }
    }
}

impl NoiseDistribution {
    /// One zero-mean draw with standard deviation `sigma`.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, sigma: f64) -> f64 {
        match self {
            Self::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
            Self::Uniform => sigma * 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub n_cr: usize,
    #[serde(default)]
    pub distribution: NoiseDistribution,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.016,
            n_cr: 10,
            distribution: NoiseDistribution::Gaussian,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(MacCapError::invalid(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.n_cr == 0 {
            return Err(MacCapError::invalid("n_cr must be at least 1"));
        }
        Ok(())
    }
}

/// `N × D` joint-space rows fed to the adaptor as keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSequence {
    rows: Mat,
}

impl RegionFeatureSequence {
    pub fn new(rows: Mat) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(MacCapError::shape("empty region sequence"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(MacCapError::NumericFailure("non-finite region feature".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Repeats `t_c` `n_cr` times and perturbs each copy:
/// row `i` = `normalize(t_c + n_i)`. Noise is drawn row by row, dimension
/// by dimension, from `rng`.
pub fn inject_region_noise<R: Rng + ?Sized>(
    t_c: &TextEmbedding,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<RegionFeatureSequence> {
    cfg.validate()?;
    let d = t_c.dim();
    let mut rows = Mat::zeros((cfg.n_cr, d));
    let mut buf = vec![0.0; d];
    for i in 0..cfg.n_cr {
        for (b, &t) in buf.iter_mut().zip(t_c.as_slice()) {
            *b = t + cfg.distribution.sample(rng, cfg.sigma);
        }
        for (j, v) in l2_normalize(&buf)?.into_iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    RegionFeatureSequence::new(rows)
}

/// [`inject_region_noise`] with a fresh ChaCha8 stream seeded by `seed`.
pub fn inject_region_noise_seeded(t_c: &TextEmbedding, cfg: &NoiseConfig, seed: u64) -> Result<RegionFeatureSequence> {
    inject_region_noise(t_c, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorConfig {
    /// Joint embedding width `D`.
    pub embed_dim: usize,
    /// Language-model width `D_l`.
    pub lm_dim: usize,
    pub n_q: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl AdaptorConfig {
    /// 8 heads, FFN width `4·D`, output MLP width `max(D, D_l)`.
    pub fn new(embed_dim: usize, lm_dim: usize, n_q: usize, seed: u64) -> Self {
        Self {
            embed_dim,
            lm_dim,
            n_q,
            n_heads: 8,
            ffn_hidden: 4 * embed_dim,
            mlp_hidden: embed_dim.max(lm_dim),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.lm_dim == 0 || self.n_q == 0 {
            return Err(MacCapError::invalid("adaptor dims and n_q must be >= 1"));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(MacCapError::invalid(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.ffn_hidden == 0 || self.mlp_hidden == 0 {
            return Err(MacCapError::invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }
}

/// Trainable adaptor weights. Also used for gradients and optimizer state,
/// which share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorParams {
    config: AdaptorConfig,
    tensors: TensorMap,
}

impl AdaptorParams {
    /// Scaled-normal initialization from `config.seed`.
    pub fn init(config: AdaptorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, domain::ADAPTOR_INIT, 0));
        let mut t = TensorMap::new();
        t.insert("queries".into(), nn::normal_matrix(&mut rng, config.n_q, d, 1.0));
        nn::init_layer_norm(&mut t, "self_attn.ln", d);
        nn::init_attention(&mut rng, &mut t, "self_attn", d);
        nn::init_layer_norm(&mut t, "cross_attn.ln", d);
        nn::init_attention(&mut rng, &mut t, "cross_attn", d);
        nn::init_layer_norm(&mut t, "ffn.ln", d);
        nn::init_mlp(&mut rng, &mut t, "ffn", d, config.ffn_hidden, d);
        nn::init_mlp(&mut rng, &mut t, "proj", d, config.mlp_hidden, config.lm_dim);
        Ok(Self { config, tensors: t })
    }

    /// A parameter set holding no tensors.
    pub fn empty(config: AdaptorConfig) -> Self {
        Self {
            config,
            tensors: TensorMap::new(),
        }
    }

    pub fn from_tensors(config: AdaptorConfig, tensors: TensorMap) -> Result<Self> {
        let reference = Self::init(config.clone())?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(x) if x.dim() == t.dim() => {}
                Some(x) => {
                    return Err(MacCapError::Format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        x.dim(),
                        t.dim()
                    )))
                }
                None => return Err(MacCapError::Format(format!("missing tensor {name}"))),
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(MacCapError::Format(format!("unexpected tensor {extra}")));
        }
        if tensors.values().flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
            return Err(MacCapError::NumericFailure("non-finite adaptor weight".into()));
        }
        Ok(Self { config, tensors })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn config(&self) -> &AdaptorConfig {
        &self.config
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorMap {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }
}

/// Total number of trainable scalars.
pub fn count_parameters(params: &AdaptorParams) -> usize {
    params.tensors.values().map(|t| t.len()).sum()
}

/// `N_q × D_l` soft prompt for the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEmbedding {
    rows: Mat,
}

impl PrefixEmbedding {
    pub fn new(rows: Mat) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(MacCapError::NumericFailure(
                "prefix embedding has non-finite entries".into(),
            ));
        }
        Ok(Self { rows })
    }

    /// A prefix with no rows, for prompting the language model directly.
    pub fn empty(lm_dim: usize) -> Self {
        Self {
            rows: Mat::zeros((0, lm_dim)),
        }
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn n_q(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Lexicographic row order; ties keep their original order.
fn canonical_row_order(m: &Mat) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| {
        m.row(a)
            .iter()
            .zip(m.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

/// Records the adaptor forward pass on `tape`; returns the `E` variable.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &VarMap,
    config: &AdaptorConfig,
    input: Var,
) -> Result<Var> {
    let width = tape.value(input).ncols();
    if width != config.embed_dim {
        return Err(MacCapError::shape(format!(
            "adaptor expects rows of width {}, got {width}",
            config.embed_dim
        )));
    }
    if tape.value(input).nrows() == 0 {
        return Err(MacCapError::shape("adaptor input has no rows"));
    }
    let order = canonical_row_order(tape.value(input));
    let memory = tape.gather_rows(input, &order);

    let q = vars.get("queries")?;
    let h = nn::layer_norm(tape, vars, "self_attn.ln", q)?;
    let a = nn::multi_head_attention(tape, vars, "self_attn", h, h, config.n_heads, Mask::None)?;
    let q = tape.add(q, a);

    let h = nn::layer_norm(tape, vars, "cross_attn.ln", q)?;
    let a = nn::multi_head_attention(
        tape,
        vars,
        "cross_attn",
        h,
        memory,
        config.n_heads,
        Mask::None,
    )?;
    let q = tape.add(q, a);

    let h = nn::layer_norm(tape, vars, "ffn.ln", q)?;
    let f = nn::mlp(tape, vars, "ffn", h)?;
    let q_prime = tape.add(q, f);

    nn::mlp(tape, vars, "proj", q_prime)
}

pub fn adaptor_forward(
    input: &RegionFeatureSequence,
    params: &AdaptorParams,
) -> Result<PrefixEmbedding> {
    let mut tape = Tape::new();
    let vars = VarMap::register(&mut tape, &params.tensors, false);
    let x = tape.constant(input.rows().clone());
    let e = forward_on_tape(&mut tape, &vars, &params.config, x)?;
    PrefixEmbedding::new(tape.value(e).clone())
}

/// Loss value and the gradient of every adaptor tensor.
#[derive(Debug, Clone)]
pub struct AdaptorGradients {
    pub loss: f64,
    pub grads: AdaptorParams,
}

/// Exact gradients of `loss_fn ∘ adaptor_forward` with respect to every
/// adaptor tensor. `loss_fn` receives the tape and the `E` variable and
/// returns a `1 × 1` loss variable; anything it creates as a constant (for
/// example frozen language-model weights) receives no gradient.
pub fn adaptor_gradients<F>(
    input: &RegionFeatureSequence,
    params: &AdaptorParams,
    loss_fn: F,
) -> Result<AdaptorGradients>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = VarMap::register(&mut tape, &params.tensors, true);
    let x = tape.constant(input.rows().clone());
    let e = forward_on_tape(&mut tape, &vars, &params.config, x)?;
    let loss = loss_fn(&mut tape, e)?;
    let value = tape.value(loss);
    if value.dim() != (1, 1) {
        return Err(MacCapError::shape(format!(
            "loss must be 1x1, got {:?}",
            value.dim()
        )));
    }
    let loss_value = value[[0, 0]];
    if !loss_value.is_finite() {
        let e_max = tape.value(e).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(MacCapError::NumericFailure(format!(
            "loss is {loss_value}; max |E| = {e_max}, input rows = {}",
            input.len()
        )));
    }
    let mut g = tape.backward(loss);
    let mut grads = params.zeros_like();
    for (name, var) in vars.iter() {
        if let Some(d) = g.take(*var) {
            grads.tensors.insert(name.clone(), d);
        }
    }
    Ok(AdaptorGradients {
        loss: loss_value,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, seed: u64) -> TextEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        TextEmbedding::normalized(&v).unwrap()
    }

    #[test]
    fn noise_rejects_negative_sigma() {
        let cfg = NoiseConfig {
            sigma: -0.1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            inject_region_noise(&unit(8, 1), &cfg, &mut rng),
            Err(MacCapError::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_sigma_rows_equal_input() {
        let t = unit(16, 2);
        let cfg = NoiseConfig {
            sigma: 0.0,
            n_cr: 5,
            distribution: NoiseDistribution::Uniform,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = inject_region_noise(&t, &cfg, &mut rng).unwrap();
        for row in seq.rows().rows() {
            assert_eq!(row.to_vec(), t.as_slice());
        }
    }

    #[test]
    fn uniform_noise_has_requested_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| NoiseDistribution::Uniform.sample(&mut rng, 0.5))
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.005);
        assert!(xs.iter().all(|x| x.abs() <= 0.5 * 3f64.sqrt()));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = AdaptorConfig::new(16, 8, 3, 11);
        assert_eq!(AdaptorParams::init(cfg.clone()).unwrap(), AdaptorParams::init(cfg).unwrap());
    }

    #[test]
    fn shape_errors() {
        let params = AdaptorParams::init(AdaptorConfig::new(16, 8, 3, 1)).unwrap();
        let bad = RegionFeatureSequence::new(Mat::ones((4, 12))).unwrap();
        assert!(matches!(adaptor_forward(&bad, &params), Err(MacCapError::Shape(_))));
        let mut cfg = AdaptorConfig::new(12, 8, 3, 1);
        cfg.n_heads = 5;
        assert!(AdaptorParams::init(cfg).is_err());
    }

    #[test]
    fn from_tensors_checks_layout() {
        let params = AdaptorParams::init(AdaptorConfig::new(16, 8, 3, 1)).unwrap();
        let mut t = params.tensors().clone();
        assert!(AdaptorParams::from_tensors(params.config().clone(), t.clone()).is_ok());
        t.insert("queries".into(), Mat::zeros((2, 16)));
        assert!(AdaptorParams::from_tensors(params.config().clone(), t).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let params = AdaptorParams::init(AdaptorConfig::new(16, 8, 2, 1)).unwrap();
        let input = RegionFeatureSequence::new(Mat::ones((3, 16))).unwrap();
        let err = adaptor_gradients(&input, &params, |tape, e| {
            let s = tape.sum(e);
            Ok(tape.scale(s, f64::INFINITY))
        })
        .unwrap_err();
        assert!(matches!(err, MacCapError::NumericFailure(_)));
    }
}
