//! Building blocks shared by the adaptor decoder and the toy language model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Mask, Mat, Tape, Var};
use crate::error::{MacCapError, Result};

/// Named tensors in a fixed (sorted) order.
pub type TensorMap = BTreeMap<String, Mat>;

/// Tape variables for a [`TensorMap`].
#[derive(Debug, Clone)]
pub struct VarMap {
    vars: BTreeMap<String, Var>,
}

impl VarMap {
    pub fn register(tape: &mut Tape, tensors: &TensorMap, trainable: bool) -> Self {
        let vars = tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MacCapError::Format(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// Inserts `prefix.{wq,bq,wk,bk,wv,bv,wo,bo}` for a `dim → dim` attention.
pub fn init_attention<R: Rng + ?Sized>(rng: &mut R, tensors: &mut TensorMap, prefix: &str, dim: usize) {
    let std = 1.0 / (dim as f64).sqrt();
    for w in ["q", "k", "v", "o"] {
        tensors.insert(format!("{prefix}.w{w}"), normal_matrix(rng, dim, dim, std));
        tensors.insert(format!("{prefix}.b{w}"), Mat::zeros((1, dim)));
    }
}

pub fn init_layer_norm(tensors: &mut TensorMap, prefix: &str, dim: usize) {
    tensors.insert(format!("{prefix}.gain"), Mat::ones((1, dim)));
    tensors.insert(format!("{prefix}.bias"), Mat::zeros((1, dim)));
}

/// Inserts `prefix.{w1,b1,w2,b2}` for a two-layer GELU network.
pub fn init_mlp<R: Rng + ?Sized>(
    rng: &mut R,
    tensors: &mut TensorMap,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
) {
    tensors.insert(
        format!("{prefix}.w1"),
        normal_matrix(rng, input, hidden, 1.0 / (input as f64).sqrt()),
    );
    tensors.insert(format!("{prefix}.b1"), Mat::zeros((1, hidden)));
    tensors.insert(
        format!("{prefix}.w2"),
        normal_matrix(rng, hidden, output, 1.0 / (hidden as f64).sqrt()),
    );
    tensors.insert(format!("{prefix}.b2"), Mat::zeros((1, output)));
}

pub fn layer_norm(tape: &mut Tape, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.gain"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, b))
}

pub fn mlp(tape: &mut Tape, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.affine(
        x,
        vars.get(&format!("{prefix}.w1"))?,
        vars.get(&format!("{prefix}.b1"))?,
    );
    let h = tape.gelu(h);
    Ok(tape.affine(
        h,
        vars.get(&format!("{prefix}.w2"))?,
        vars.get(&format!("{prefix}.b2"))?,
    ))
}

/// Multi-head scaled dot-product attention of `queries` over `memory`.
pub fn multi_head_attention(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    queries: Var,
    memory: Var,
    n_heads: usize,
    mask: Mask,
) -> Result<Var> {
    let get = |n: &str| vars.get(&format!("{prefix}.{n}"));
    let q = tape.affine(queries, get("wq")?, get("bq")?);
    let k = tape.affine(memory, get("wk")?, get("bk")?);
    let v = tape.affine(memory, get("wv")?, get("bv")?);
    let dim = tape.value(q).ncols();
    if n_heads == 0 || !dim.is_multiple_of(n_heads) {
        return Err(MacCapError::invalid(format!(
            "width {dim} not divisible by {n_heads} heads"
        )));
    }
    let dh = dim / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let p = tape.softmax_rows(scores, mask);
        heads.push(tape.matmul(p, vh));
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    Ok(tape.affine(joined, get("wo")?, get("bo")?))
}
