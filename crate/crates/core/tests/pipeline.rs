//! Training, checkpointing and resuming on a small synthetic task.

use std::cell::RefCell;
use std::path::Path;

use candle_core::{DType, Device};
use tagforge_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use tagforge_core::corpus::Post;
use tagforge_core::encoder::{BackboneAssets, Registry};
use tagforge_core::model::{Component, ModelConfig, TagModel};
use tagforge_core::synth::{SynthConfig, SyntheticTask};
use tagforge_core::train::{prepare_examples, train, TrainConfig, TrainOptions, TrainingState};
use tagforge_core::vocab::{build_vocab, count_tags, TagVocabulary};
use tagforge_core::Error;

fn task(posts: usize) -> (Vec<Post>, TagVocabulary) {
    let task = SyntheticTask::new(SynthConfig {
        posts,
        ..SynthConfig::default()
    })
    .unwrap();
    let posts = task.generate();
    let vocab = build_vocab(&count_tags(&posts), 1).unwrap();
    (posts, vocab)
}

fn model(vocab: &TagVocabulary) -> TagModel {
    let spec = Registry::builtin(Path::new("/none")).resolve("stub").unwrap();
    let assets = BackboneAssets::resolve(&spec).unwrap();
    let cfg = ModelConfig::new(Component::ALL.to_vec(), "stub", vocab.len(), 16);
    TagModel::initialize(cfg, &assets, 42, DType::F32, &Device::Cpu).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 2.0,
        initial_lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss_and_logs_every_step() {
    let (posts, vocab) = task(256);
    let m = model(&vocab);
    let examples = prepare_examples(&m, &posts, &vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let out = train(
        &m,
        &examples,
        &config(),
        TrainOptions {
            log_path: Some(&log),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(out.steps, 16);
    assert!(out.epoch_losses[1] < out.epoch_losses[0]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 16);
    for key in ["step", "loss", "lr", "examples_per_sec"] {
        assert!(lines[0].get(key).is_some());
    }
    assert_eq!(lines[15]["step"], 16);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (posts, vocab) = task(128);
    let cfg = config();

    let full = model(&vocab);
    let examples = prepare_examples(&full, &posts, &vocab).unwrap();
    let reference = train(&full, &examples, &cfg, TrainOptions::default()).unwrap();

    // Run once, keeping the state saved after the first epoch.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("epoch1");
    let first = model(&vocab);
    let saved = RefCell::new(false);
    let mut cb = |state: &TrainingState| {
        if !*saved.borrow() {
            save_checkpoint(&first, &vocab, &ckpt, Some(state))?;
            *saved.borrow_mut() = true;
        }
        Ok(())
    };
    train(
        &first,
        &examples,
        &cfg,
        TrainOptions {
            on_checkpoint: Some(&mut cb),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let restored = load_checkpoint(&ckpt, DType::F32, &Device::Cpu).unwrap();
    let state = restored.training.expect("training state saved");
    assert_eq!(state.step, 4);
    let resumed = train(
        &restored.model,
        &examples,
        &cfg,
        TrainOptions {
            resume: Some(state),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.step_losses.len(), reference.step_losses.len());
    for (a, b) in resumed.step_losses.iter().zip(&reference.step_losses) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_integrity_errors() {
    let (posts, vocab) = task(64);
    let m = model(&vocab);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let digest = save_checkpoint(&m, &vocab, &path, None).unwrap();
    let loaded = load_checkpoint(&path, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(loaded.digest, digest);
    assert_eq!(loaded.vocab, vocab);
    assert_eq!(m.forward(&posts[0]).unwrap(), loaded.model.forward(&posts[0]).unwrap());

    match load_checkpoint_for(&path, vocab.len() + 3, DType::F32, &Device::Cpu) {
        Err(Error::VocabWidthMismatch { checkpoint, requested }) => {
            assert_eq!((checkpoint, requested), (vocab.len(), vocab.len() + 3));
        }
        other => panic!("unexpected {other:?}"),
    }

    let head = path.join("head.safetensors");
    let bytes = std::fs::read(&head).unwrap();
    std::fs::write(&head, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint(&path, DType::F32, &Device::Cpu),
        Err(Error::DigestMismatch { .. })
    ));
}
