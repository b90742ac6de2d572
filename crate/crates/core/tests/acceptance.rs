//! Acceptance checks on the toy stack. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails. Criterion 11 needs real
//! feature dumps in `MACCAP_ASSET_DIR` and is skipped without them.

use std::collections::HashMap;
use std::time::Instant;

use maccap::adaptor::{
    adaptor_forward, adaptor_gradients, inject_region_noise, AdaptorConfig, AdaptorParams, NoiseConfig,
    NoiseDistribution, PrefixEmbedding, RegionFeatureSequence,
};
use maccap::autodiff::{Mat, Tape, Var};
use maccap::backbone::{
    assets, generate_synthetic_pairs, PatchFeatureSet, ProjectedPatchSet, SyntheticPairConfig, TextEmbedding,
    VisionLanguageBackbone,
};
use maccap::config::RunConfig;
use maccap::gap_analysis::{
    gap_distribution, pair_similarity_stats, pairs_from_synthetic, subregion_win_fraction, AnalysisPair, GapMode,
    RepresentationMode,
};
use maccap::inference::{aggregate_subregions, rerank, select_informative_patches, Aggregate, CaptionCandidate, TextEncoder};
use maccap::langmodel::{beam_search, sequence_log_prob, BeamConfig, ToyLm, ToyLmConfig};
use maccap::metrics::{bleu, cider_scores, cider_with, CiderConfig, EvalSet};
use maccap::stack::ToyStack;
use maccap::synth::synthetic_corpus;
use maccap::training::{corpus_from_captions, mean_reconstruction_loss, train, TrainConfig, TrainPreset};
use maccap::vqa::{build_prompt, topk_accuracy, RankedCandidate, VqaResult};
use maccap::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = std::result::Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

// Negating the whole condition makes a NaN comparison fail the check.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Row-normalized random non-negative weights; small integers make ties
/// common.
fn random_distribution(rng: &mut ChaCha8Rng, n: usize, integer: bool) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| if integer { rng.random_range(1..=4) as f64 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn toy_stack() -> ToyStack {
    ToyStack::from_config(&RunConfig::default()).expect("default toy stack")
}

/// Noise rows are unit-norm, exact at zero noise, and the noise is zero-mean.
fn criterion_1() -> Outcome {
    const CALLS: usize = 10_000;
    const D: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut sum = vec![0.0; D];
    let mut count = 0usize;
    let mut worst_norm = 0.0f64;
    let mut worst_row = 0.0f64;
    let mut zero_calls = 0;
    for call in 0..CALLS {
        let t = TextEmbedding::new(unit_vec(&mut rng, D)).map_err(|e| e.to_string())?;
        let zero = call % 10 == 0;
        let cfg = NoiseConfig {
            sigma: if zero { 0.0 } else { rng.random_range(0.001..0.2) },
            n_cr: rng.random_range(1..=10),
            distribution: if rng.random::<bool>() {
                NoiseDistribution::Gaussian
            } else {
                NoiseDistribution::Uniform
            },
        };
        let mut replay = ChaCha8Rng::seed_from_u64(call as u64);
        let mut call_rng = replay.clone();
        let seq = ok(inject_region_noise(&t, &cfg, &mut call_rng))?;
        ensure!(seq.rows().dim() == (cfg.n_cr, D), "call {call}: shape {:?}", seq.rows().dim());
        for (i, row) in seq.rows().rows().into_iter().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((norm - 1.0).abs());
            if zero {
                ensure!(row.to_vec() == t.as_slice(), "call {call} row {i}: zero-noise row differs from input");
                continue;
            }
            let noise: Vec<f64> = (0..D).map(|_| cfg.distribution.sample(&mut replay, cfg.sigma)).collect();
            let raw: Vec<f64> = t.as_slice().iter().zip(&noise).map(|(a, b)| a + b).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..D {
                worst_row = worst_row.max((row[j] - raw[j] / n).abs());
                sum[j] += noise[j] / cfg.sigma;
            }
            count += 1;
        }
        if zero {
            zero_calls += 1;
        }
    }
    ensure!(worst_norm <= 1e-5, "row norm off by {worst_norm:e}");
    ensure!(worst_row <= 1e-12, "rows differ from normalize(t + n) by {worst_row:e}");
    // Bound in units of sigma, as the calls use different sigmas.
    let bound = 5.0 / (CALLS as f64).sqrt();
    let worst_mean = sum.iter().map(|s| (s / count as f64).abs()).fold(0.0, f64::max);
    ensure!(worst_mean <= bound, "per-dimension noise mean {worst_mean} exceeds {bound}");
    Ok(format!(
        "{CALLS} calls ({zero_calls} at zero noise), max |norm-1| = {worst_norm:.1e}, max |mean noise|/sigma = {worst_mean:.4} <= {bound}"
    ))
}

/// Loss for gradient checks: cross-entropy of `E · M` against fixed targets.
fn probe_loss<'a>(m: &'a Mat, targets: &'a [usize]) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    move |tape, e| {
        let mv = tape.constant(m.clone());
        let logits = tape.matmul(e, mv);
        let g = tape.gelu(logits);
        Ok(tape.nll(g, targets))
    }
}

/// Analytic adaptor gradients agree with central differences, and the
/// forward pass ignores the order of its input rows.
fn criterion_2() -> Outcome {
    let configs = [(8usize, 6usize, 2usize, 2usize, 3usize), (12, 4, 3, 3, 5), (16, 10, 1, 4, 2), (4, 8, 2, 1, 4)];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (c, &(d, dl, n_q, heads, rows)) in configs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + c as u64);
        let mut cfg = AdaptorConfig::new(d, dl, n_q, 40 + c as u64);
        cfg.n_heads = heads;
        cfg.ffn_hidden = 2 * d;
        let mut params = ok(AdaptorParams::init(cfg))?;
        // Perturb every tensor so layer-norm gains and biases are generic.
        for m in params.tensors_mut().values_mut() {
            m.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let input = ok(RegionFeatureSequence::new(randn(&mut rng, rows, d)))?;
        let m = randn(&mut rng, dl, 5);
        let targets: Vec<usize> = (0..n_q).map(|_| rng.random_range(0..5)).collect();
        let analytic = ok(adaptor_gradients(&input, &params, probe_loss(&m, &targets)))?;
        let loss_at = |p: &AdaptorParams| -> std::result::Result<f64, String> {
            Ok(ok(adaptor_gradients(&input, p, probe_loss(&m, &targets)))?.loss)
        };
        // Fourth-order five-point stencil keeps rounding noise near 1e-13,
        // well below the tolerance even where the true gradient is zero
        // (key biases, which softmax ignores).
        let h = 1e-3;
        let names: Vec<String> = params.tensors().keys().cloned().collect();
        for name in names {
            let shape = params.get(&name).unwrap().dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = params.get(&name).unwrap()[[i, j]];
                    let mut at = |x: f64| -> std::result::Result<f64, String> {
                        params.get_mut(&name).unwrap()[[i, j]] = x;
                        loss_at(&params)
                    };
                    let (p2, p1, m1, m2) = (at(orig + 2.0 * h)?, at(orig + h)?, at(orig - h)?, at(orig - 2.0 * h)?);
                    params.get_mut(&name).unwrap()[[i, j]] = orig;
                    let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
                    let a = analytic.grads.get(&name).unwrap()[[i, j]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }

        let base = ok(adaptor_forward(&input, &params))?;
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..rows).collect();
            order.shuffle(&mut rng);
            let permuted = ok(RegionFeatureSequence::new(input.rows().select(ndarray::Axis(0), &order)))?;
            ensure!(
                ok(adaptor_forward(&permuted, &params))? == base,
                "config {c}: output changed under row permutation {order:?}"
            );
        }
    }
    ensure!(worst < 1e-4, "max relative gradient error {worst:e}");
    Ok(format!(
        "{} configs, {checked} parameters, max relative error {worst:.2e}; permutation invariance exact",
        configs.len()
    ))
}

/// Subregion selection and pooling match sort and triple-loop oracles.
fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let n_p = rng.random_range(1..=20);
        let d_v = rng.random_range(2..=8);
        let d = rng.random_range(2..=8);
        let n = n_p + 1;
        let ties = inst % 2 == 0;
        let mut attn = Mat::zeros((n, n));
        for i in 0..n {
            for (j, v) in random_distribution(&mut rng, n, ties).into_iter().enumerate() {
                attn[[i, j]] = v;
            }
        }
        let cls = attn.row(0).to_vec();
        let patches = ok(PatchFeatureSet::new(randn(&mut rng, n, d_v), cls.clone(), Some(attn.clone())))?;
        let proj_tokens = randn(&mut rng, n, d);
        let proj = ok(ProjectedPatchSet::new(proj_tokens.clone()))?;
        let n_cr = rng.random_range(1..=n_p);

        // Selection sort on (score desc, index asc).
        let mut remaining: Vec<usize> = (1..n).collect();
        let mut expected_idx = Vec::new();
        while expected_idx.len() < n_cr {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (a, b) = (remaining[k], remaining[best]);
                if cls[a] > cls[b] || (cls[a] == cls[b] && a < b) {
                    best = k;
                }
            }
            expected_idx.push(remaining.remove(best));
        }
        let sel = ok(select_informative_patches(&patches, n_cr))?;
        ensure!(sel.patch_indices == expected_idx, "instance {inst}: selected {:?}, expected {expected_idx:?}", sel.patch_indices);
        for (k, &p) in expected_idx.iter().enumerate() {
            ensure!(sel.attention.row(k) == attn.row(p), "instance {inst}: attention row {k} is not row {p}");
        }

        for mode in [Aggregate::Sum, Aggregate::Mean] {
            let f = ok(aggregate_subregions(&proj, &sel, mode))?;
            for (k, &p) in expected_idx.iter().enumerate() {
                for j in 0..d {
                    let mut pooled = 0.0;
                    for t in 0..n {
                        pooled += attn[[p, t]] * proj_tokens[[t, j]];
                    }
                    let g = proj_tokens[[0, j]];
                    let row = if mode == Aggregate::Sum { pooled + g } else { (pooled + g) / 2.0 };
                    worst = worst.max((f.pooled[[k, j]] - pooled).abs()).max((f.rows[[k, j]] - row).abs());
                    if mode == Aggregate::Sum {
                        ensure!(
                            f.rows[[k, j]] == f.pooled[[k, j]] + f.global[j],
                            "instance {inst}: row {k} is not pooled + global"
                        );
                        worst = worst.max((f.rows[[k, j]] - f.global[j] - f.pooled[[k, j]]).abs());
                    }
                }
            }
            ensure!(f.global == proj_tokens.row(0).to_vec(), "instance {inst}: global row differs");
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

struct TableEncoder(HashMap<String, Vec<f64>>);

impl TextEncoder for TableEncoder {
    fn embed(&self, text: &str) -> Result<Option<TextEmbedding>> {
        match self.0.get(text) {
            Some(v) => TextEmbedding::new(v.clone()).map(Some),
            None => Ok(None),
        }
    }
}

/// Rerank picks the first maximum over brute-force cosines.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut tie_sets = 0;
    for set in 0..100 {
        let d = rng.random_range(2..=16);
        let pool = rng.random_range(1..=5);
        let mut table: HashMap<String, Vec<f64>> = HashMap::new();
        let mut texts = Vec::new();
        for k in 0..pool {
            let text = format!("caption {k}");
            // Some texts share an embedding so their scores tie exactly.
            let v = if k > 0 && rng.random_bool(0.3) {
                table[&texts[0]].clone()
            } else {
                unit_vec(&mut rng, d)
            };
            table.insert(text.clone(), v);
            texts.push(text);
        }
        let s = rng.random_range(1..=12);
        let mut candidates: Vec<CaptionCandidate> = (0..s)
            .map(|_| {
                let text = if rng.random_bool(0.1) {
                    String::new()
                } else {
                    texts[rng.random_range(0..pool)].clone()
                };
                CaptionCandidate {
                    ids: Vec::new(),
                    text,
                    lm_score: 0.0,
                    similarity: None,
                }
            })
            .collect();
        let image: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let sims: Vec<f64> = candidates
            .iter()
            .map(|c| table.get(&c.text).map_or(-1.0, |v| naive_cosine(v, &image)))
            .collect();
        let mut expected = 0;
        for i in 1..sims.len() {
            if sims[i] > sims[expected] {
                expected = i;
            }
        }
        if sims.iter().filter(|&&x| x == sims[expected]).count() > 1 {
            tie_sets += 1;
        }
        let got = ok(rerank(&mut candidates, &image, &TableEncoder(table)))?;
        ensure!(got == expected, "set {set}: rerank chose {got}, oracle {expected} (sims {sims:?})");
        for (c, s) in candidates.iter().zip(&sims) {
            let cs = c.similarity.ok_or("similarity not recorded")?;
            ensure!((cs - s).abs() <= 1e-12, "set {set}: similarity {cs} vs {s}");
        }
    }
    ensure!(tie_sets > 0, "fixtures produced no ties");
    Ok(format!("100 sets ({tie_sets} with tied maxima) match"))
}

/// Full-width beam search equals exhaustive enumeration on a 3-token model.
fn criterion_5() -> Outcome {
    for seed in 0..20u64 {
        let lm = ok(ToyLm::new(ToyLmConfig {
            vocab_size: 3,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_positions: 8,
            max_gen_len: 3,
            logit_scale: 4.0,
            seed,
            ..ToyLmConfig::default()
        }))?;
        let eos = lm.config().eos;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let prefix = ok(PrefixEmbedding::new(randn(&mut rng, 2, 8)))?;

        let mut sequences: Vec<Vec<u32>> = Vec::new();
        for len in 1..=3usize {
            for code in 0..3usize.pow(len as u32) {
                let seq: Vec<u32> = (0..len).map(|p| ((code / 3usize.pow(p as u32)) % 3) as u32).collect();
                let eos_pos = seq.iter().position(|&t| t == eos);
                // Only the last token may be eos; shorter sequences must end with it.
                let valid = match eos_pos {
                    Some(p) => p == len - 1,
                    None => len == 3,
                };
                if valid {
                    sequences.push(seq);
                }
            }
        }
        let mut best: Option<(f64, Vec<u32>)> = None;
        for s in &sequences {
            let lp = ok(sequence_log_prob(&lm, &prefix, s))?;
            let better = match &best {
                None => true,
                Some((b, bs)) => lp > *b || (lp == *b && s < bs),
            };
            if better {
                best = Some((lp, s.clone()));
            }
        }
        let (best_lp, best_seq) = best.ok_or("no sequences")?;
        let h = ok(beam_search(
            &lm,
            &prefix,
            &BeamConfig {
                n_beams: 27,
                max_len: 3,
                length_normalize: false,
            },
        ))?;
        let mut full = h.ids.clone();
        if h.ended_with_eos {
            full.push(eos);
        }
        ensure!(full == best_seq, "seed {seed}: beam {full:?}, exhaustive {best_seq:?}");
        ensure!((h.score - best_lp).abs() <= 1e-9, "seed {seed}: score {} vs {best_lp}", h.score);
    }
    Ok("20 seeds, beam result equals exhaustive argmax".into())
}

/// Training lowers the loss, leaves the frozen parts untouched, and is
/// bit-reproducible across worker counts.
fn criterion_6() -> Outcome {
    let stack = toy_stack();
    let corpus = ok(corpus_from_captions(&synthetic_corpus(512, 11), 15, &stack.vocab, "synthetic"))?;
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        learning_rate: 1e-2,
        seed: 1,
        workers: Some(1),
        ..TrainConfig::default()
    };
    let (p1, r1) = ok(train(&corpus, &cfg, &stack.backbone, &stack.lm))?;
    let (p2, r2) = ok(train(
        &corpus,
        &TrainConfig {
            workers: Some(4),
            ..cfg.clone()
        },
        &stack.backbone,
        &stack.lm,
    ))?;
    ensure!(r1.aborted.is_none(), "training aborted: {:?}", r1.aborted);
    let first = r1.losses[0];
    let last = *r1.losses.last().unwrap();
    let ratio = last / first;
    ensure!(ratio <= 0.7, "loss ratio {ratio:.4} ({first:.4} -> {last:.4})");
    ensure!(r1.frozen_weights_unchanged() && r2.frozen_weights_unchanged(), "frozen weights changed");
    ensure!(p1 == p2, "parameters differ between identically seeded runs");
    ensure!(
        r1.losses.iter().map(|x| x.to_bits()).eq(r2.losses.iter().map(|x| x.to_bits())),
        "loss curves differ between identically seeded runs"
    );
    Ok(format!(
        "loss {first:.4} -> {last:.4} (ratio {ratio:.3} <= 0.7), checksums unchanged, 1- and 4-worker runs bit-identical"
    ))
}

/// Synthetic gaps are centred; a clean patch makes the mix beat the global
/// row.
fn criterion_7() -> Outcome {
    let stack = toy_stack();
    let mut cfg = SyntheticPairConfig {
        gap_sigma: 0.05,
        patch_noise_sigma: 0.1,
        low_noise_sigma: None,
        seed: 7,
        n_pairs: 5000,
    };
    let raw = ok(generate_synthetic_pairs(&stack.backbone, &stack.vocab, &cfg))?;
    let pairs = ok(pairs_from_synthetic(&stack.backbone, &raw))?;
    let g = ok(gap_distribution(&pairs, GapMode::Global))?;
    let p = ok(gap_distribution(&pairs, GapMode::Patch))?;
    ensure!(g.pooled_mean.abs() <= 0.002, "global gap mean {}", g.pooled_mean);
    ensure!(p.pooled_mean.abs() <= 0.002, "patch gap mean {}", p.pooled_mean);

    cfg.low_noise_sigma = Some(0.01);
    let raw = ok(generate_synthetic_pairs(&stack.backbone, &stack.vocab, &cfg))?;
    let pairs = ok(pairs_from_synthetic(&stack.backbone, &raw))?;
    let global = ok(pair_similarity_stats(&pairs, RepresentationMode::Global))?;
    let mix = ok(pair_similarity_stats(&pairs, RepresentationMode::Mix))?;
    ensure!(mix.mean >= global.mean, "mix mean {} < global mean {}", mix.mean, global.mean);
    Ok(format!(
        "gap means {:.5} (global) {:.5} (patch); mix {:.4} >= global {:.4}",
        g.pooled_mean, p.pooled_mean, mix.mean, global.mean
    ))
}

/// Reference run (training seed 1): the noise-trained adaptor scored 2.7783
/// nats on gap images against 2.8020 without noise, a margin of 0.024. Its
/// gap penalty was 0.122 nats against 0.175, a ratio of 0.70. Seeds 2 to 5
/// gave margins 0.001 to 0.063 and ratios 0.59 to 0.73.
const TESTBED_MIN_MARGIN: f64 = 0.01;
const TESTBED_MAX_PENALTY_RATIO: f64 = 0.85;

/// Each caption's image is one embedding `normalize(T + g)`, shared by all
/// `N_CR` region rows just as the noise-free preset replicates `T` during
/// training. The adaptors are trained to convergence on a small corpus and
/// scored on the images of its captions, with gap draws never seen in
/// training, so the comparison isolates robustness to the gap from caption
/// generalization, which the frozen random toy LM makes noisy.
fn criterion_8() -> Outcome {
    const SIGMA_GAP: f64 = 0.016;
    const N_CR: usize = 10;
    let stack = toy_stack();
    let corpus = ok(corpus_from_captions(&synthetic_corpus(64, 21), 15, &stack.vocab, "synthetic"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut items = |sigma: f64| -> std::result::Result<Vec<(RegionFeatureSequence, Vec<u32>)>, String> {
        let mut out = Vec::new();
        for ids in &corpus.tokenized {
            let t = ok(stack.backbone.encode_text(ids))?;
            let raw: Vec<f64> = t.as_slice().iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rows = Mat::from_shape_fn((N_CR, t.dim()), |(_, j)| raw[j] / n);
            out.push((ok(RegionFeatureSequence::new(rows))?, ids.clone()));
        }
        Ok(out)
    };
    let clean_items = items(0.0)?;
    let gap_items = items(SIGMA_GAP)?;

    let mut gap_loss = Vec::new();
    let mut penalty = Vec::new();
    for preset in [TrainPreset::MultipleNoNoise, TrainPreset::MultipleNoise] {
        let mut cfg = TrainConfig {
            epochs: 600,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        preset.apply(&mut cfg.noise, N_CR, SIGMA_GAP);
        let (params, report) = ok(train(&corpus, &cfg, &stack.backbone, &stack.lm))?;
        ensure!(report.aborted.is_none(), "{} aborted", preset.name());
        let on_gap = ok(mean_reconstruction_loss(&params, &stack.lm, &gap_items))?;
        let on_clean = ok(mean_reconstruction_loss(&params, &stack.lm, &clean_items))?;
        gap_loss.push(on_gap);
        penalty.push(on_gap - on_clean);
    }
    let (without, with) = (gap_loss[0], gap_loss[1]);
    let margin = without - with;
    ensure!(
        margin >= TESTBED_MIN_MARGIN,
        "with noise {with:.4}, without {without:.4}: margin {margin:.4} < {TESTBED_MIN_MARGIN}"
    );
    let ratio = penalty[1] / penalty[0];
    ensure!(
        penalty[0] > 0.0 && ratio <= TESTBED_MAX_PENALTY_RATIO,
        "gap penalty with noise {:.4}, without {:.4}: ratio {ratio:.3} > {TESTBED_MAX_PENALTY_RATIO}",
        penalty[1],
        penalty[0]
    );
    Ok(format!(
        "image-side loss with noise {with:.4} < without {without:.4} (margin {margin:.4}); gap penalty ratio {ratio:.3}"
    ))
}

/// BLEU and CIDEr against closed forms worked out by hand.
fn criterion_9() -> Outcome {
    let close = |name: &str, got: f64, want: f64| -> std::result::Result<(), String> {
        ensure!((got - want).abs() <= 1e-6, "{name}: got {got}, want {want}");
        Ok(())
    };
    // Lengths: candidates 3+3+3 = 9; closest references 4, 3, 3 = 10.
    // Clipped matches: unigrams 8/9, bigrams 5/6, trigrams 2/3.
    let set = ok(EvalSet::from_pairs(&[
        ("a dog runs", vec!["a dog runs fast"]),
        ("the cat sat", vec!["the cat sat down", "a cat sat"]),
        ("birds fly low", vec!["birds fly high"]),
    ]))?;
    let bp = (1.0f64 - 10.0 / 9.0).exp();
    close("bleu1", ok(bleu(&set, 1))?, bp * 8.0 / 9.0)?;
    close("bleu2", ok(bleu(&set, 2))?, bp * (8.0f64 / 9.0 * 5.0 / 6.0).sqrt())?;
    close("bleu3", ok(bleu(&set, 3))?, bp * (8.0f64 / 9.0 * 5.0 / 6.0 * 2.0 / 3.0).cbrt())?;
    close("bleu4 with no 4-gram matches", ok(bleu(&set, 4))?, 0.0)?;

    let identity = ok(EvalSet::from_pairs(&[
        ("a dog runs on the grass", vec!["a dog runs on the grass"]),
        ("two birds sit on a wire", vec!["two birds sit on a wire"]),
        ("a red car", vec!["a red car"]),
    ]))?;
    for n in 1..=3 {
        close(&format!("identity bleu{n}"), ok(bleu(&identity, n))?, 1.0)?;
    }

    // Every n-gram occurs in one item's references, so all idf weights equal
    // ln 3 and cancel. Item 1, "p p q" vs "p q r", equal lengths:
    //   unigrams (2,1,0)·(1,1,1) / (√5·√3) = 3/√15, clipped 2/√15
    //   bigrams {pp, pq}·{pq, qr} = 1/2; trigrams share nothing.
    // Items 2 and 3 match exactly on n = 1, 2 and have no longer n-grams.
    let set = ok(EvalSet::from_pairs(&[
        ("p p q", vec!["p q r"]),
        ("s t", vec!["s t"]),
        ("u v", vec!["u v"]),
    ]))?;
    let item1 = (3.0 / 15f64.sqrt() + 0.5) / 4.0;
    let item1_d = (2.0 / 15f64.sqrt() + 0.5) / 4.0;
    let cfg = CiderConfig::default();
    let scores = ok(cider_scores(&set, &cfg))?;
    close("cider item 1", scores[0], item1)?;
    close("cider item 2", scores[1], 0.5)?;
    close("cider", ok(cider_with(&set, &cfg))?, (item1 + 1.0) / 3.0)?;
    let d_cfg = CiderConfig { cider_d: true, ..cfg };
    close("cider-d", ok(cider_with(&set, &d_cfg))?, (item1_d + 1.0) / 3.0)?;

    // Length penalty: "p q" vs "p q r" differ by one word, exp(-1/72).
    //   unigrams 2/(√2·√3), bigrams 1/√2.
    let set = ok(EvalSet::from_pairs(&[
        ("p q", vec!["p q r"]),
        ("s t", vec!["s t"]),
        ("u v", vec!["u v"]),
    ]))?;
    let item1 = (-1.0f64 / 72.0).exp() * (2.0 / 6f64.sqrt() + 1.0 / 2f64.sqrt()) / 4.0;
    close("cider with length penalty", ok(cider_with(&set, &cfg))?, (item1 + 1.0) / 3.0)?;
    let scaled = CiderConfig { scale_by_ten: true, ..cfg };
    close("cider x10", ok(cider_with(&set, &scaled))?, 10.0 * (item1 + 1.0) / 3.0)?;
    Ok("BLEU-1..4 and CIDEr/CIDEr-D match hand values; identity BLEU = 1".into())
}

/// Top-k accuracy never drops as k grows; the prompt template is exact.
fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for fixture in 0..50 {
        let pool: Vec<String> = (0..rng.random_range(1..=15)).map(|i| format!("answer {i}")).collect();
        let results: Vec<VqaResult> = (0..rng.random_range(1..=20))
            .map(|q| {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                let mut sims: Vec<f64> = order.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
                sims.sort_by(|a, b| b.total_cmp(a));
                let ranked = if rng.random_bool(0.1) {
                    Vec::new()
                } else {
                    order
                        .iter()
                        .zip(&sims)
                        .map(|(&i, &s)| RankedCandidate {
                            index: i,
                            text: pool[i].clone(),
                            similarity: s,
                        })
                        .collect()
                };
                let gt = if rng.random_bool(0.2) {
                    "unlisted".to_string()
                } else {
                    pool[rng.random_range(0..pool.len())].clone()
                };
                VqaResult::new(serde_json::json!(q), "cap".into(), "ans".into(), gt, ranked)
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=pool.len() + 2 {
            let acc = ok(topk_accuracy(&results, k))?;
            ensure!(acc >= prev, "fixture {fixture}: accuracy fell from {prev} to {acc} at k = {k}");
            ensure!((0.0..=1.0).contains(&acc), "fixture {fixture}: accuracy {acc} out of range");
            prev = acc;
        }
    }
    let prompt = ok(build_prompt("a man riding a horse", "what animal is shown?"))?;
    ensure!(
        prompt.as_bytes() == b"a man riding a horse Question: what animal is shown? Answer:",
        "prompt was {prompt:?}"
    );
    Ok("50 randomized fixtures monotone in k; prompt template byte-exact".into())
}

/// Reference statistics of real feature dumps.
fn criterion_11() -> Option<Outcome> {
    let dir = assets::asset_dir()?;
    Some((|| {
        let mut raw = ok(assets::load_projected_pairs(&dir))?;
        raw.truncate(5000);
        let pairs: Vec<AnalysisPair> =
            ok(raw.into_iter().map(|(t, p)| AnalysisPair::new(t, p)).collect::<Result<_>>())?;
        let global = ok(pair_similarity_stats(&pairs, RepresentationMode::Global))?;
        let mix = ok(pair_similarity_stats(&pairs, RepresentationMode::Mix))?;
        let win = ok(subregion_win_fraction(&pairs))?;
        let g = ok(gap_distribution(&pairs, GapMode::Global))?;
        let p = ok(gap_distribution(&pairs, GapMode::Patch))?;
        ensure!((global.mean - 0.330).abs() <= 0.015, "global mean {}", global.mean);
        ensure!((mix.mean - 0.352).abs() <= 0.015, "mix mean {}", mix.mean);
        ensure!((win - 0.33).abs() <= 0.03, "win fraction {win}");
        ensure!(g.pooled_mean.abs() <= 0.02 && p.pooled_mean.abs() <= 0.02, "gap means {} {}", g.pooled_mean, p.pooled_mean);
        Ok(format!(
            "{} pairs: global {:.4}, mix {:.4}, win {:.3}, gap means {:.4}/{:.4}",
            pairs.len(),
            global.mean,
            mix.mean,
            win,
            g.pooled_mean,
            p.pooled_mean
        ))
    })())
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "noise injection contract", criterion_1),
        (2, "adaptor gradients and permutation invariance", criterion_2),
        (3, "subregion aggregation oracle", criterion_3),
        (4, "rerank oracle", criterion_4),
        (5, "beam search oracle", criterion_5),
        (6, "end-to-end learning signal", criterion_6),
        (7, "synthetic gap analysis", criterion_7),
        (8, "noise ablation on gap testbed", criterion_8),
        (9, "caption metrics", criterion_9),
        (10, "question answering harness", criterion_10),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if only.is_empty() || only.contains(&11) {
        match criterion_11() {
            None => println!("criterion 11 SKIP real-feature statistics: {} not set", assets::ENV_VAR),
            Some(Ok(detail)) => println!("criterion 11 PASS real-feature statistics: {detail}"),
            Some(Err(detail)) => {
                failed += 1;
                println!("criterion 11 FAIL real-feature statistics: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
