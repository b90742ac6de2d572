use maccap::adaptor::AdaptorParams;
use maccap::backbone::{synthetic_image, ImageInput, SyntheticPairConfig, VisionLanguageBackbone};
use maccap::checkpoint::{load_checkpoint, save_checkpoint};
use maccap::config::{Backend, RunConfig};
use maccap::inference::{read_manifest, write_jsonl, BackboneTextEncoder, CaptionPipeline, ManifestEntry, SamplingConfig};
use maccap::langmodel::BeamConfig;
use maccap::stack::ToyStack;
use maccap::synth::{subjects, synthetic_caption, synthetic_corpus};
use maccap::training::{corpus_from_captions, train, TextCorpus, TrainConfig};
use maccap::vecmath::cosine_similarity;
use maccap::vqa::{answer_item, answer_rank, CandidateSet};
use maccap::MacCapError;

fn stack() -> ToyStack {
    ToyStack::from_config(&RunConfig::default()).unwrap()
}

fn small_corpus(stack: &ToyStack) -> TextCorpus {
    corpus_from_captions(&synthetic_corpus(24, 4), 15, &stack.vocab, "synthetic").unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-2,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn trained(stack: &ToyStack) -> AdaptorParams {
    train(&small_corpus(stack), &small_config(), &stack.backbone, &stack.lm).unwrap().0
}

fn images(n: u64, stack: &ToyStack) -> Vec<ImageInput> {
    let cfg = SyntheticPairConfig {
        gap_sigma: 0.05,
        patch_noise_sigma: 0.1,
        low_noise_sigma: None,
        seed: 17,
        n_pairs: n as usize,
    };
    (0..n)
        .map(|i| ImageInput::Synthetic(synthetic_image(&cfg, stack.vocab.encode(&synthetic_caption(17, i)), i)))
        .collect()
}

fn sampling() -> SamplingConfig {
    SamplingConfig {
        s: 3,
        max_len: 8,
        seed: 2,
        ..SamplingConfig::default()
    }
}

#[test]
fn real_backend_is_unavailable() {
    let cfg = RunConfig {
        backend: Backend::Real,
        ..RunConfig::default()
    };
    assert!(matches!(ToyStack::from_config(&cfg), Err(MacCapError::BackendUnavailable(_))));
}

#[test]
fn caption_picks_the_most_similar_candidate() {
    let stack = stack();
    let adaptor = trained(&stack);
    let pipeline = CaptionPipeline {
        backbone: &stack.backbone,
        lm: &stack.lm,
        vocab: &stack.vocab,
        adaptor: &adaptor,
        sampling: sampling(),
    };
    for image in images(3, &stack) {
        let r = pipeline.caption(&image).unwrap();
        assert_eq!(r.candidates.len(), 3);
        let global = stack.backbone.project_patches(&stack.backbone.encode_image_patches(&image).unwrap()).unwrap().global();
        let want = if r.caption.is_empty() {
            -1.0
        } else {
            let t = stack.backbone.encode_text(&stack.vocab.encode(&r.caption)).unwrap();
            cosine_similarity(t.as_slice(), global.as_slice()).unwrap()
        };
        assert!((r.similarity - want).abs() < 1e-12, "{} vs {want}", r.similarity);
        for (i, c) in r.candidates.iter().enumerate() {
            let s = c.similarity.unwrap();
            assert!(s < r.similarity || (s == r.similarity && i >= r.chosen));
        }
    }
}

#[test]
fn captions_do_not_depend_on_pool_size() {
    let stack = stack();
    let adaptor = trained(&stack);
    let pipeline = CaptionPipeline {
        backbone: &stack.backbone,
        lm: &stack.lm,
        vocab: &stack.vocab,
        adaptor: &adaptor,
        sampling: sampling(),
    };
    let imgs = images(2, &stack);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| imgs.iter().map(|i| pipeline.caption(i).unwrap()).collect::<Vec<_>>())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn training_does_not_depend_on_cache_or_workers() {
    let stack = stack();
    let corpus = small_corpus(&stack);
    let dir = tempfile::tempdir().unwrap();
    let base = train(&corpus, &small_config(), &stack.backbone, &stack.lm).unwrap();
    let variants = [
        TrainConfig {
            embedding_cache: false,
            ..small_config()
        },
        TrainConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            workers: Some(2),
            ..small_config()
        },
        TrainConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            workers: Some(3),
            ..small_config()
        },
    ];
    for cfg in variants {
        let (params, report) = train(&corpus, &cfg, &stack.backbone, &stack.lm).unwrap();
        assert_eq!(params, base.0);
        assert_eq!(report.losses, base.1.losses);
        assert!(report.frozen_weights_unchanged());
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "one persistent cache file");
}

#[test]
fn checkpoint_from_another_stack_is_rejected() {
    let stack = stack();
    let adaptor = trained(&stack);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&adaptor, &stack.compatibility(), &small_config().noise, &path).unwrap();
    let (header, back) = load_checkpoint(&path, &stack.compatibility()).unwrap();
    assert_eq!(back, adaptor);
    assert_eq!(header.noise, small_config().noise);

    let mut cfg = RunConfig::default();
    cfg.lm.seed += 1;
    let other = ToyStack::from_config(&cfg).unwrap();
    assert!(matches!(
        load_checkpoint(&path, &other.compatibility()),
        Err(MacCapError::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn manifest_paths_resolve_against_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let entries = vec![
        ManifestEntry {
            image_id: serde_json::json!("a"),
            image_path: "img/a.png".into(),
        },
        ManifestEntry {
            image_id: serde_json::json!(2),
            image_path: "/abs/b.png".into(),
        },
    ];
    write_jsonl(&path, &entries).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back[0].image_id, serde_json::json!("a"));
    assert_eq!(back[0].image_path, dir.path().join("img/a.png").display().to_string());
    assert_eq!(back[1].image_path, "/abs/b.png");

    std::fs::write(&path, "{\"image_id\": 1}\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(MacCapError::Format(_))));
}

#[test]
fn vqa_hits_agree_with_answer_rank() {
    let stack = stack();
    let adaptor = trained(&stack);
    let pipeline = CaptionPipeline {
        backbone: &stack.backbone,
        lm: &stack.lm,
        vocab: &stack.vocab,
        adaptor: &adaptor,
        sampling: sampling(),
    };
    let encoder = BackboneTextEncoder {
        backbone: &stack.backbone,
        vocab: &stack.vocab,
    };
    let candidates = CandidateSet::new(subjects().iter().map(|s| s.to_string()).collect(), &encoder).unwrap();
    let beam = BeamConfig {
        n_beams: 2,
        max_len: 5,
        length_normalize: false,
    };
    for (i, image) in images(2, &stack).iter().enumerate() {
        let truth = subjects()[i];
        let r = answer_item(&pipeline, image, serde_json::json!(i), "what is this?", truth, &candidates, &encoder, &beam)
            .unwrap();
        let rank = answer_rank(&r.ranked_candidates, truth);
        for k in [1, 5, 10] {
            assert_eq!(r.hit_at(k), rank.is_some_and(|p| p < k), "k = {k}");
        }
    }
}

#[test]
fn empty_corpus_is_rejected() {
    let stack = stack();
    let none: [&str; 0] = [];
    assert!(corpus_from_captions(&none, 15, &stack.vocab, "empty").is_err());
}
