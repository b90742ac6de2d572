//! The `maccap` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adaptor::{AdaptorParams, NoiseDistribution};
use crate::backbone::{assets, generate_synthetic_pairs, synthetic_image, ImageInput, SyntheticPairConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Backend, RunConfig, Sweep};
use crate::error::{MacCapError, Result};
use crate::gap_analysis::{
    histogram_csv, histogram_svg, pairs_from_synthetic, pca_scatter, scatter_csv, stats_csv, AnalysisPair,
    AnalysisReport, MixStrategy,
};
use crate::inference::{
    read_manifest, write_jsonl, Aggregate, BackboneTextEncoder, CaptionPipeline, ManifestOutput,
};
use crate::metrics::{evaluate, EvalItem, EvalSet};
use crate::stack::{ensure_dir, ToyStack, VOCAB_FILE};
use crate::synth::{subject_of, subjects, synthetic_caption, synthetic_corpus};
use crate::training::{corpus_from_captions, load_corpus, train, write_report, TextCorpus, TrainPreset};
use crate::vecmath::StableSum;
use crate::vqa::{answer_item, read_candidates, read_questions, CandidateSet, VqaItem, VqaReport, VqaResult};

#[derive(Parser, Debug)]
#[command(
    name = "maccap",
    version,
    about = "Zero-shot image captioning from text-only adaptor training",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Similarity and gap statistics of paired text and image embeddings
    Analyze(AnalyzeArgs),
    /// Train the adaptor on captions alone
    Train(TrainArgs),
    /// Caption images with a trained adaptor
    Caption(CaptionArgs),
    /// Answer questions about images by captioning and retrieval
    Vqa(VqaArgs),
    /// Score captions against references
    Eval(EvalArgs),
    /// Sweep training noise, inference patch count, or the four presets
    Ablate(AblateArgs),
    /// Write a synthetic corpus, images, manifests and questions
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; flags take precedence over its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// toy | real
    #[arg(long)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; outputs do not depend on this
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Noise standard deviation for training (and inference unless
    /// --inference-sigma is given)
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub inference_sigma: Option<f64>,
    /// Region rows per sample
    #[arg(long)]
    pub n_cr: Option<usize>,
    /// Adaptor queries (prefix length)
    #[arg(long)]
    pub n_q: Option<usize>,
    /// Noisy decodes per image
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub beams: Option<usize>,
    /// gaussian | uniform
    #[arg(long)]
    pub distribution: Option<NoiseDistribution>,
    /// sum | mean
    #[arg(long)]
    pub aggregate: Option<Aggregate>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tokenizer file; defaults to the one beside the checkpoint
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Synthetic pairs to generate (toy backend)
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub gap_sigma: Option<f64>,
    #[arg(long)]
    pub patch_noise_sigma: Option<f64>,
    /// Noise level of one designated patch per image
    #[arg(long)]
    pub low_noise_sigma: Option<f64>,
    /// best-patch | average-patches
    #[arg(long)]
    pub mix: Option<MixStrategy>,
    /// Also render histograms as SVG
    #[arg(long)]
    pub plot: bool,
    /// Also export a 2-D projection of text and image embeddings
    #[arg(long)]
    pub scatter: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Plain-text or JSON-lines captions; a synthetic corpus is used when absent
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_words: Option<usize>,
    /// Encode captions on every visit instead of once
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Train with one of the four region/noise presets
    #[arg(long)]
    pub preset: Option<TrainPreset>,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON-lines manifest of {"image_id", "image_path"}
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Keep every decoded candidate in the output
    #[arg(long)]
    pub with_candidates: bool,
}

#[derive(Args, Debug)]
pub struct VqaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON-lines of {"image_path", "question", "answer", "question_id"}
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Answer candidates, one per line
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON-lines of {"candidate", "references": [...]}
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Clip candidate n-gram weights by the reference weights
    #[arg(long)]
    pub cider_d: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// sigma | patches | presets
    #[arg(long)]
    pub sweep: Option<Sweep>,
    /// Comma-separated grid, e.g. 0,0.016,0.1
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub eval_images: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub captions: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub gap_sigma: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(MacCapError),
}

impl From<MacCapError> for CliError {
    fn from(e: MacCapError) -> Self {
        Self::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    let workers = match &cmd {
        Command::Analyze(a) => a.common.workers,
        Command::Train(a) => a.common.workers,
        Command::Caption(a) => a.common.workers,
        Command::Vqa(a) => a.common.workers,
        Command::Eval(a) => a.common.workers,
        Command::Ablate(a) => a.common.workers,
        Command::Synth(a) => a.common.workers,
    };
    if workers == Some(0) {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    crate::training::run_pool(workers, || match cmd {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Vqa(a) => cmd_vqa(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
    })?
}

/// Defaults, then the config file, then flags.
fn resolve(common: &CommonArgs, model: Option<&ModelArgs>, extra: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = common.backend {
        cfg.backend = b;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if let Some(m) = model {
        if let Some(s) = m.sigma {
            cfg.train.noise.sigma = s;
            cfg.sampling.inference_sigma = s;
        }
        if let Some(s) = m.inference_sigma {
            cfg.sampling.inference_sigma = s;
        }
        if let Some(n) = m.n_cr {
            cfg.train.noise.n_cr = n;
            cfg.sampling.n_cr = n;
        }
        if let Some(n) = m.n_q {
            cfg.train.n_q = n;
        }
        if let Some(s) = m.samples {
            cfg.sampling.s = s;
        }
        if let Some(b) = m.beams {
            cfg.sampling.n_beams = b;
        }
        if let Some(d) = m.distribution {
            cfg.train.noise.distribution = d;
            cfg.sampling.distribution = d;
        }
        if let Some(a) = m.aggregate {
            cfg.sampling.aggregate = a;
        }
        if m.checkpoint.is_some() {
            cfg.paths.checkpoint = m.checkpoint.clone();
        }
        if m.vocab.is_some() {
            cfg.paths.vocab = m.vocab.clone();
        }
    }
    extra(&mut cfg);
    cfg.propagate();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.out_dir)?;
    cfg.write_to(&cfg.out_dir)?;
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| MacCapError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, None, |c| {
        if let Some(n) = a.pairs {
            c.analysis.pairs = n;
        }
        if let Some(s) = a.gap_sigma {
            c.analysis.gap_sigma = s;
        }
        if let Some(s) = a.patch_noise_sigma {
            c.analysis.patch_noise_sigma = s;
        }
        if a.low_noise_sigma.is_some() {
            c.analysis.low_noise_sigma = a.low_noise_sigma;
        }
        if let Some(m) = a.mix {
            c.analysis.mix = m;
        }
        c.analysis.plot |= a.plot;
        c.analysis.scatter |= a.scatter;
    })?;
    let pairs: Vec<AnalysisPair> = match cfg.backend {
        Backend::Toy => {
            let stack = ToyStack::from_config(&cfg)?;
            let syn = SyntheticPairConfig {
                gap_sigma: cfg.analysis.gap_sigma,
                patch_noise_sigma: cfg.analysis.patch_noise_sigma,
                low_noise_sigma: cfg.analysis.low_noise_sigma,
                seed: cfg.seed,
                n_pairs: cfg.analysis.pairs,
            };
            syn.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let raw = generate_synthetic_pairs(&stack.backbone, &stack.vocab, &syn)?;
            pairs_from_synthetic(&stack.backbone, &raw)?
        }
        Backend::Real => {
            let dir = assets::asset_dir().ok_or_else(|| {
                MacCapError::BackendUnavailable(format!("set {} to a directory with feature dumps", assets::ENV_VAR))
            })?;
            assets::load_projected_pairs(&dir)?
                .into_iter()
                .map(|(t, p)| AnalysisPair::new(t, p))
                .collect::<Result<_>>()?
        }
    };
    prepare_out_dir(&cfg)?;
    let report = AnalysisReport::compute(&pairs, cfg.analysis.mix, &cfg.analysis.histogram)?;
    let out = &cfg.out_dir;
    write_file(&out.join("stats.csv"), &stats_csv(&report.rows()))?;
    write_file(&out.join("hist_global.csv"), &histogram_csv(&report.global_gap))?;
    write_file(&out.join("hist_patch.csv"), &histogram_csv(&report.patch_gap))?;
    if cfg.analysis.plot {
        write_file(&out.join("hist_global.svg"), &histogram_svg(&report.global_gap, "global gap"))?;
        write_file(&out.join("hist_patch.svg"), &histogram_svg(&report.patch_gap, "patch gap"))?;
    }
    if cfg.analysis.scatter {
        write_file(&out.join("scatter.csv"), &scatter_csv(&pca_scatter(&pairs)?))?;
    }
    println!(
        "pairs={} global_mean={:.4} mix_mean={:.4} win_fraction={:.4} gap_mean_global={:.6} gap_mean_patch={:.6}",
        pairs.len(),
        report.global.mean,
        report.mix.mean,
        report.win_fraction,
        report.global_gap.pooled_mean,
        report.patch_gap.pooled_mean
    );
    Ok(())
}

fn training_corpus(cfg: &RunConfig, stack: &ToyStack) -> Result<TextCorpus> {
    match &cfg.paths.corpus {
        Some(p) => load_corpus(p, cfg.max_words, &stack.vocab),
        None => {
            log::info!("no corpus given; using {} synthetic captions", cfg.synth.captions);
            let caps = synthetic_corpus(cfg.synth.captions, cfg.seed);
            corpus_from_captions(&caps, cfg.max_words, &stack.vocab, "synthetic")
        }
    }
}

/// Trains and writes the checkpoint, report and vocabulary into `dir`.
fn train_into(cfg: &RunConfig, stack: &ToyStack, corpus: &TextCorpus, dir: &Path) -> Result<AdaptorParams> {
    let (params, mut report) = train(corpus, &cfg.train, &stack.backbone, &stack.lm)?;
    let ckpt = dir.join("adaptor.ckpt");
    save_checkpoint(&params, &stack.compatibility(), &cfg.train.noise, &ckpt)?;
    stack.vocab.save(&dir.join(VOCAB_FILE))?;
    report.checkpoint = Some(ckpt.display().to_string());
    write_report(&dir.join("train_report.json"), &report)?;
    if let Some(reason) = &report.aborted {
        return Err(MacCapError::NumericFailure(format!(
            "training stopped early ({reason}); last finite parameters saved to {}",
            ckpt.display()
        )));
    }
    Ok(params)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, Some(&a.model), |c| {
        if a.corpus.is_some() {
            c.paths.corpus = a.corpus.clone();
        }
        if let Some(e) = a.epochs {
            c.train.epochs = e;
        }
        if let Some(b) = a.batch_size {
            c.train.batch_size = b;
        }
        if let Some(lr) = a.lr {
            c.train.learning_rate = lr;
        }
        if let Some(m) = a.max_words {
            c.max_words = m;
        }
        if a.no_cache {
            c.train.embedding_cache = false;
        }
        if a.cache_dir.is_some() {
            c.train.cache_dir = a.cache_dir.clone();
        }
        if let Some(p) = a.preset {
            let sigma = if c.train.noise.sigma > 0.0 { c.train.noise.sigma } else { 0.016 };
            let n_cr = if c.train.noise.n_cr > 1 { c.train.noise.n_cr } else { 10 };
            p.apply(&mut c.train.noise, n_cr, sigma);
        }
    })?;
    let stack = ToyStack::from_config(&cfg)?;
    let corpus = training_corpus(&cfg, &stack)?;
    prepare_out_dir(&cfg)?;
    log::info!(
        "training on {} captions ({} dropped over {} words)",
        corpus.stats.kept,
        corpus.stats.dropped,
        cfg.max_words
    );
    train_into(&cfg, &stack, &corpus, &cfg.out_dir)?;
    println!("checkpoint written to {}", cfg.out_dir.join("adaptor.ckpt").display());
    Ok(())
}

fn load_adaptor(cfg: &RunConfig, stack: &ToyStack) -> Result<AdaptorParams> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| MacCapError::invalid("--checkpoint is required"))?;
    Ok(load_checkpoint(path, &stack.compatibility())?.1)
}

/// A synthetic image with its reference caption.
struct EvalImage {
    id: serde_json::Value,
    image: ImageInput,
    reference: Option<String>,
}

fn synthetic_eval_images(cfg: &RunConfig, stack: &ToyStack, n: usize, seed: u64) -> Vec<EvalImage> {
    let syn = SyntheticPairConfig {
        gap_sigma: cfg.synth.gap_sigma,
        patch_noise_sigma: cfg.synth.patch_noise_sigma,
        low_noise_sigma: None,
        seed,
        n_pairs: n,
    };
    (0..n as u64)
        .map(|i| {
            let caption = synthetic_caption(seed, i);
            let tokens = stack.vocab.encode(&caption);
            EvalImage {
                id: serde_json::json!(i),
                image: ImageInput::Synthetic(synthetic_image(&syn, tokens, i)),
                reference: Some(caption),
            }
        })
        .collect()
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(0x5eed)
}

fn caption_images(
    cfg: &RunConfig,
    stack: &ToyStack,
    adaptor: &AdaptorParams,
    images: &[EvalImage],
) -> Result<Vec<ManifestOutput>> {
    let pipeline = CaptionPipeline {
        backbone: &stack.backbone,
        lm: &stack.lm,
        vocab: &stack.vocab,
        adaptor,
        sampling: cfg.sampling.clone(),
    };
    images
        .iter()
        .map(|img| {
            let r = pipeline.caption(&img.image)?;
            Ok(ManifestOutput {
                image_id: img.id.clone(),
                caption: r.caption,
                similarity: r.similarity,
                candidates: cfg.with_candidates.then_some(r.candidates),
            })
        })
        .collect()
}

fn cmd_caption(a: CaptionArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, Some(&a.model), |c| {
        if a.images.is_some() {
            c.paths.images = a.images.clone();
        }
        c.with_candidates |= a.with_candidates;
    })?;
    let stack = ToyStack::from_config(&cfg)?;
    let adaptor = load_adaptor(&cfg, &stack)?;
    let images = match &cfg.paths.images {
        Some(m) => read_manifest(m)?
            .into_iter()
            .map(|e| {
                Ok(EvalImage {
                    image: ImageInput::load(Path::new(&e.image_path), cfg.backbone.image_size)?,
                    id: e.image_id,
                    reference: None,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            log::info!("no manifest given; captioning {} synthetic images", cfg.synth.images);
            synthetic_eval_images(&cfg, &stack, cfg.synth.images, eval_seed(&cfg))
        }
    };
    prepare_out_dir(&cfg)?;
    let outputs = caption_images(&cfg, &stack, &adaptor, &images)?;
    write_jsonl(&cfg.out_dir.join("captions.jsonl"), &outputs)?;
    let refs: Vec<EvalItem> = outputs
        .iter()
        .zip(&images)
        .filter_map(|(o, img)| {
            img.reference.as_ref().map(|r| EvalItem {
                candidate: o.caption.clone(),
                references: vec![r.clone()],
            })
        })
        .collect();
    if !refs.is_empty() {
        write_jsonl(&cfg.out_dir.join("eval_input.jsonl"), &refs)?;
    }
    println!("{} captions written to {}", outputs.len(), cfg.out_dir.join("captions.jsonl").display());
    Ok(())
}

fn cmd_vqa(a: VqaArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, Some(&a.model), |c| {
        if a.questions.is_some() {
            c.paths.questions = a.questions.clone();
        }
        if a.candidates.is_some() {
            c.paths.candidates = a.candidates.clone();
        }
    })?;
    let stack = ToyStack::from_config(&cfg)?;
    let adaptor = load_adaptor(&cfg, &stack)?;
    let questions_path = cfg
        .paths
        .questions
        .as_ref()
        .ok_or_else(|| MacCapError::invalid("--questions is required"))?;
    let candidates_path = cfg
        .paths
        .candidates
        .as_ref()
        .ok_or_else(|| MacCapError::invalid("--candidates is required"))?;
    let items: Vec<VqaItem> = read_questions(questions_path)?;
    let encoder = BackboneTextEncoder {
        backbone: &stack.backbone,
        vocab: &stack.vocab,
    };
    let candidates = CandidateSet::new(read_candidates(candidates_path)?, &encoder)?;
    let pipeline = CaptionPipeline {
        backbone: &stack.backbone,
        lm: &stack.lm,
        vocab: &stack.vocab,
        adaptor: &adaptor,
        sampling: cfg.sampling.clone(),
    };
    let beam = crate::langmodel::BeamConfig {
        n_beams: cfg.sampling.n_beams,
        max_len: 5,
        length_normalize: false,
    };
    prepare_out_dir(&cfg)?;
    let results = items
        .iter()
        .map(|it| {
            let image = ImageInput::load(Path::new(&it.image_path), cfg.backbone.image_size)?;
            answer_item(
                &pipeline,
                &image,
                it.question_id.clone(),
                &it.question,
                &it.answer,
                &candidates,
                &encoder,
                &beam,
            )
        })
        .collect::<Result<Vec<VqaResult>>>()?;
    let report = VqaReport::from_results(&results)?;
    write_json(&cfg.out_dir.join("vqa_report.json"), &report)?;
    write_jsonl(&cfg.out_dir.join("vqa_items.jsonl"), &results)?;
    println!(
        "top1={:.4} top5={:.4} top10={:.4} n_items={}",
        report.top1, report.top5, report.top10, report.n_items
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, None, |c| {
        if a.input.is_some() {
            c.paths.eval_input = a.input.clone();
        }
        c.cider.cider_d |= a.cider_d;
    })?;
    let input = cfg
        .paths
        .eval_input
        .as_ref()
        .ok_or_else(|| MacCapError::invalid("--input is required"))?;
    let set = EvalSet::read_jsonl(input)?;
    let report = evaluate(&set, &cfg.cider)?;
    prepare_out_dir(&cfg)?;
    write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string(&report).map_err(MacCapError::from)?);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    value: String,
    bleu1: f64,
    bleu4: f64,
    cider: f64,
    mean_similarity: f64,
    config_hash: String,
}

fn score_run(cfg: &RunConfig, stack: &ToyStack, adaptor: &AdaptorParams, images: &[EvalImage], value: String) -> Result<AblationRow> {
    let outputs = caption_images(cfg, stack, adaptor, images)?;
    let set = EvalSet::new(
        outputs
            .iter()
            .zip(images)
            .map(|(o, img)| EvalItem {
                candidate: o.caption.clone(),
                references: vec![img.reference.clone().expect("synthetic images carry references")],
            })
            .collect(),
    )?;
    let report = evaluate(&set, &cfg.cider)?;
    let sims: StableSum = outputs.iter().map(|o| o.similarity).collect();
    Ok(AblationRow {
        value,
        bleu1: report.bleu1,
        bleu4: report.bleu4,
        cider: report.cider.unwrap_or(0.0),
        mean_similarity: sims.mean().unwrap_or(0.0),
        config_hash: cfg.hash_hex()?,
    })
}

fn ablation_csv(rows: &[AblationRow], column: &str) -> String {
    let mut s = format!("{column},bleu1,bleu4,cider,mean_similarity,config_hash\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value, r.bleu1, r.bleu4, r.cider, r.mean_similarity, r.config_hash
        ));
    }
    s
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, Some(&a.model), |c| {
        if let Some(s) = a.sweep {
            c.ablation.sweep = s;
        }
        if let Some(v) = &a.values {
            c.ablation.values = v.clone();
        }
        if let Some(e) = a.epochs {
            c.ablation.epochs = e;
        }
        if let Some(b) = a.batch_size {
            c.train.batch_size = b;
        }
        if let Some(lr) = a.lr {
            c.train.learning_rate = lr;
        }
        if let Some(n) = a.corpus_size {
            c.ablation.corpus_size = n;
        }
        if let Some(n) = a.eval_images {
            c.ablation.eval_images = n;
        }
        c.train.epochs = c.ablation.epochs;
        c.synth.captions = c.ablation.corpus_size;
    })?;
    let grid = cfg.ablation.grid();
    match cfg.ablation.sweep {
        Sweep::Sigma => {
            if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CliError::Usage("sigma values must be finite and >= 0".into()));
            }
        }
        Sweep::Patches => {
            let n_p = cfg.backbone.n_patches as f64;
            if grid.iter().any(|v| v.fract() != 0.0 || *v < 1.0 || *v > n_p) {
                return Err(CliError::Usage(format!("patch counts must be integers in 1..={n_p}")));
            }
        }
        Sweep::Presets => {
            if !cfg.ablation.values.is_empty() {
                return Err(CliError::Usage("the presets sweep takes no --values".into()));
            }
        }
    }
    if cfg.ablation.sweep != Sweep::Presets && grid.is_empty() {
        return Err(CliError::Usage("empty grid".into()));
    }
    if cfg.ablation.eval_images < 2 {
        return Err(CliError::Usage("--eval-images must be >= 2".into()));
    }
    let stack = ToyStack::from_config(&cfg)?;
    let corpus = training_corpus(&cfg, &stack)?;
    let images = synthetic_eval_images(&cfg, &stack, cfg.ablation.eval_images, eval_seed(&cfg));
    prepare_out_dir(&cfg)?;

    let mut rows = Vec::new();
    let column = match cfg.ablation.sweep {
        Sweep::Sigma => {
            for &sigma in &grid {
                let mut run = cfg.clone();
                run.train.noise.sigma = sigma;
                let dir = cfg.out_dir.join(format!("sigma-{sigma}"));
                ensure_dir(&dir)?;
                run.write_to(&dir)?;
                let params = train_into(&run, &stack, &corpus, &dir)?;
                rows.push(score_run(&run, &stack, &params, &images, sigma.to_string())?);
            }
            "sigma"
        }
        Sweep::Patches => {
            let dir = cfg.out_dir.join("model");
            ensure_dir(&dir)?;
            let params = train_into(&cfg, &stack, &corpus, &dir)?;
            for &n in &grid {
                let mut run = cfg.clone();
                run.sampling.n_cr = n as usize;
                rows.push(score_run(&run, &stack, &params, &images, (n as usize).to_string())?);
            }
            "n_cr"
        }
        Sweep::Presets => {
            for p in TrainPreset::ALL {
                let mut run = cfg.clone();
                p.apply(&mut run.train.noise, cfg.train.noise.n_cr.max(2), 0.016_f64.max(cfg.train.noise.sigma));
                let dir = cfg.out_dir.join(p.name());
                ensure_dir(&dir)?;
                run.write_to(&dir)?;
                let params = train_into(&run, &stack, &corpus, &dir)?;
                rows.push(score_run(&run, &stack, &params, &images, p.name().to_string())?);
            }
            "preset"
        }
    };
    let csv = ablation_csv(&rows, column);
    write_file(&cfg.out_dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let cfg = resolve(&a.common, None, |c| {
        if let Some(n) = a.captions {
            c.synth.captions = n;
        }
        if let Some(n) = a.images {
            c.synth.images = n;
        }
        if let Some(s) = a.gap_sigma {
            c.synth.gap_sigma = s;
        }
    })?;
    let stack = ToyStack::from_config(&cfg)?;
    prepare_out_dir(&cfg)?;
    let out = &cfg.out_dir;
    let mut captions = synthetic_corpus(cfg.synth.captions, cfg.seed).join("\n");
    captions.push('\n');
    write_file(&out.join("captions.txt"), &captions)?;

    let img_dir = out.join("images");
    ensure_dir(&img_dir)?;
    let images = synthetic_eval_images(&cfg, &stack, cfg.synth.images, eval_seed(&cfg));
    let mut manifest = Vec::new();
    let mut questions = Vec::new();
    let mut references = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let ImageInput::Synthetic(desc) = &img.image else {
            unreachable!("synthetic images only")
        };
        let name = format!("img_{i:04}.json");
        write_json(&img_dir.join(&name), desc)?;
        let rel = format!("images/{name}");
        manifest.push(serde_json::json!({"image_id": i, "image_path": rel}));
        let reference = img.reference.clone().expect("synthetic reference");
        if let Some(subject) = subject_of(&reference) {
            questions.push(serde_json::json!({
                "question_id": i,
                "image_path": rel,
                "question": "what is in the picture?",
                "answer": subject,
            }));
        }
        references.push(serde_json::json!({"image_id": i, "references": [reference]}));
    }
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    write_jsonl(&out.join("questions.jsonl"), &questions)?;
    write_jsonl(&out.join("references.jsonl"), &references)?;
    write_file(&out.join("candidates.txt"), &(subjects().join("\n") + "\n"))?;
    stack.vocab.save(&out.join(VOCAB_FILE))?;
    println!("synthetic data written to {}", out.display());
    Ok(())
}
