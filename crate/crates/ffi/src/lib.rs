//! C ABI for the maccap captioning toolkit.
//!
//! Every fallible function returns a [`MaccapStatus`]. On failure the message
//! is kept per thread and can be read with [`maccap_last_error_message`].
//! Strings returned through out-pointers are owned by the caller and must be
//! released with [`maccap_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use maccap::adaptor::{inject_region_noise_seeded, AdaptorParams, NoiseConfig, NoiseDistribution};
use maccap::backbone::{ImageInput, TextEmbedding, VisionLanguageBackbone};
use maccap::checkpoint::load_checkpoint;
use maccap::config::RunConfig;
use maccap::inference::CaptionPipeline;
use maccap::metrics::{bleu, cider_with, CiderConfig, EvalItem, EvalSet};
use maccap::stack::ToyStack;
use maccap::vecmath::cosine_similarity;
use maccap::vqa::build_prompt;
use maccap::MacCapError;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaccapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    IncompatibleCheckpoint = 6,
    InvalidCorpus = 7,
    InsufficientCorpus = 8,
    NumericFailure = 9,
    NoAnswer = 10,
    BackendUnavailable = 11,
    InvalidUtf8 = 12,
    Panic = 13,
}

impl From<&MacCapError> for MaccapStatus {
    fn from(e: &MacCapError) -> Self {
        match e {
            MacCapError::InvalidArgument(_) => Self::InvalidArgument,
            MacCapError::Shape(_) => Self::Shape,
            MacCapError::Io { .. } => Self::Io,
            MacCapError::Format(_) | MacCapError::Json(_) => Self::Format,
            MacCapError::IncompatibleCheckpoint(_) => Self::IncompatibleCheckpoint,
            MacCapError::InvalidCorpus(_) => Self::InvalidCorpus,
            MacCapError::InsufficientCorpus(_) => Self::InsufficientCorpus,
            MacCapError::NumericFailure(_) => Self::NumericFailure,
            MacCapError::NoAnswer(_) => Self::NoAnswer,
            MacCapError::BackendUnavailable(_) => Self::BackendUnavailable,
        }
    }
}

/// Toy backbone, language model and vocabulary.
pub struct MaccapStack {
    inner: ToyStack,
}

/// A stack plus a trained adaptor and decoding settings.
pub struct MaccapPipeline {
    stack: ToyStack,
    adaptor: AdaptorParams,
    cfg: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MaccapStatus, String);

impl From<MacCapError> for Failure {
    fn from(e: MacCapError) -> Self {
        Failure(MaccapStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MaccapStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> MaccapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MaccapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            MaccapStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MaccapStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure(MaccapStatus::Format, "string contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn load_config(path: Option<&str>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    cfg.propagate();
    cfg.validate()?;
    Ok(cfg)
}

/// Message for the last failed call on this thread, or null after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn maccap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn maccap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds the toy stack from a TOML run configuration, or the defaults when
/// `config_path` is null.
///
/// # Safety
/// `config_path` is null or a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_stack_new(config_path: *const c_char, out: *mut *mut MaccapStack) -> MaccapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = load_config(opt_str_arg(config_path, "config_path")?)?;
        let inner = ToyStack::from_config(&cfg)?;
        *out = Box::into_raw(Box::new(MaccapStack { inner }));
        Ok(())
    })
}

/// # Safety
/// `stack` is null or a live handle from [`maccap_stack_new`].
#[no_mangle]
pub unsafe extern "C" fn maccap_stack_free(stack: *mut MaccapStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Width of the joint embedding space, or 0 for a null handle.
///
/// # Safety
/// `stack` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maccap_stack_embed_dim(stack: *const MaccapStack) -> usize {
    stack.as_ref().map_or(0, |s| s.inner.backbone.spec().embed_dim)
}

/// Encodes `text` into `out`, which must hold exactly the embedding width.
///
/// # Safety
/// `stack` is a live handle, `text` a nul-terminated string and `out` points
/// to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn maccap_encode_text(
    stack: *const MaccapStack,
    text: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> MaccapStatus {
    guard(|| {
        let s = stack.as_ref().ok_or_else(|| null("stack"))?;
        let text = str_arg(text, "text")?;
        let dim = s.inner.backbone.spec().embed_dim;
        if out_len != dim {
            return Err(MacCapError::shape(format!("out_len {out_len} != embedding width {dim}")).into());
        }
        let out = out_slice(out, out_len, "out")?;
        let tokens = s.inner.vocab.encode(text);
        let emb = s.inner.backbone.encode_text(&tokens)?;
        out.copy_from_slice(emb.as_slice());
        Ok(())
    })
}

/// Cosine similarity of two vectors of length `len`.
///
/// # Safety
/// `a` and `b` point to `len` readable doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_cosine(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> MaccapStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = cosine_similarity(a, b)?;
        Ok(())
    })
}

/// Writes `n_cr` noisy unit-norm copies of `t` (length `dim`) into `out`,
/// row-major. `distribution` is 0 for Gaussian and 1 for uniform.
///
/// # Safety
/// `t` points to `dim` readable doubles and `out` to `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn maccap_inject_noise(
    t: *const f64,
    dim: usize,
    n_cr: usize,
    sigma: f64,
    distribution: u32,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> MaccapStatus {
    guard(|| {
        let t = TextEmbedding::new(slice_arg(t, dim, "t")?.to_vec())?;
        let distribution = match distribution {
            0 => NoiseDistribution::Gaussian,
            1 => NoiseDistribution::Uniform,
            other => return Err(MacCapError::invalid(format!("unknown distribution {other}")).into()),
        };
        if out_len != n_cr * dim {
            return Err(MacCapError::shape(format!("out_len {out_len} != n_cr * dim = {}", n_cr * dim)).into());
        }
        let out = out_slice(out, out_len, "out")?;
        let cfg = NoiseConfig {
            sigma,
            n_cr,
            distribution,
        };
        let rows = inject_region_noise_seeded(&t, &cfg, seed)?;
        for (o, v) in out.iter_mut().zip(rows.rows().iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Loads a pipeline from a run configuration (null for defaults) and an
/// adaptor checkpoint. The vocabulary beside the checkpoint is used when the
/// configuration names none.
///
/// # Safety
/// String arguments are null (where allowed) or nul-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_pipeline_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut MaccapPipeline,
) -> MaccapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = load_config(opt_str_arg(config_path, "config_path")?)?;
        let ckpt = str_arg(checkpoint_path, "checkpoint_path")?;
        cfg.paths.checkpoint = Some(ckpt.into());
        let stack = ToyStack::from_config(&cfg)?;
        let (_, adaptor) = load_checkpoint(Path::new(ckpt), &stack.compatibility())?;
        *out = Box::into_raw(Box::new(MaccapPipeline { stack, adaptor, cfg }));
        Ok(())
    })
}

/// # Safety
/// `pipeline` is null or a live handle from [`maccap_pipeline_load`].
#[no_mangle]
pub unsafe extern "C" fn maccap_pipeline_free(pipeline: *mut MaccapPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Captions the image at `image_path` (a pixel file, or a `.json`
/// synthetic image description).
///
/// # Safety
/// `pipeline` is a live handle, `image_path` nul-terminated, `out_caption`
/// writable and `out_similarity` null or writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_pipeline_caption(
    pipeline: *const MaccapPipeline,
    image_path: *const c_char,
    out_caption: *mut *mut c_char,
    out_similarity: *mut f64,
) -> MaccapStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        let path = str_arg(image_path, "image_path")?;
        if out_caption.is_null() {
            return Err(null("out_caption"));
        }
        let image = ImageInput::load(Path::new(path), p.cfg.backbone.image_size)?;
        let pipe = CaptionPipeline {
            backbone: &p.stack.backbone,
            lm: &p.stack.lm,
            vocab: &p.stack.vocab,
            adaptor: &p.adaptor,
            sampling: p.cfg.sampling.clone(),
        };
        let r = pipe.caption(&image)?;
        write_string(out_caption, r.caption)?;
        if let Some(s) = out_similarity.as_mut() {
            *s = r.similarity;
        }
        Ok(())
    })
}

/// `references[i]` holds item i's references separated by newlines.
unsafe fn eval_set(candidates: *const *const c_char, references: *const *const c_char, n: usize) -> Result<EvalSet, Failure> {
    if candidates.is_null() {
        return Err(null("candidates"));
    }
    if references.is_null() {
        return Err(null("references"));
    }
    let cands = std::slice::from_raw_parts(candidates, n);
    let refs = std::slice::from_raw_parts(references, n);
    let mut items = Vec::with_capacity(n);
    for (c, r) in cands.iter().zip(refs) {
        items.push(EvalItem {
            candidate: str_arg(*c, "candidate")?.to_string(),
            references: str_arg(*r, "references")?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        });
    }
    Ok(EvalSet::new(items)?)
}

/// Corpus BLEU-`max_n` over `n` items.
///
/// # Safety
/// `candidates` and `references` point to `n` nul-terminated strings;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    max_n: usize,
    out: *mut f64,
) -> MaccapStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = bleu(&eval_set(candidates, references, n)?, max_n)?;
        Ok(())
    })
}

/// Corpus CIDEr over `n` items; `cider_d` enables clipping.
///
/// # Safety
/// As for [`maccap_bleu`].
#[no_mangle]
pub unsafe extern "C" fn maccap_cider(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    cider_d: bool,
    out: *mut f64,
) -> MaccapStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = CiderConfig {
            cider_d,
            ..CiderConfig::default()
        };
        *out = cider_with(&eval_set(candidates, references, n)?, &cfg)?;
        Ok(())
    })
}

/// The question-answering prompt for a caption and question.
///
/// # Safety
/// `caption` and `question` are nul-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn maccap_build_prompt(
    caption: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> MaccapStatus {
    guard(|| {
        let prompt = build_prompt(str_arg(caption, "caption")?, str_arg(question, "question")?)?;
        write_string(out, prompt)
    })
}
