//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! model.json                  model config, backbone spec and architecture
//! vocab.tsv                   tag vocabulary
//! encoder.<name>.safetensors  one file per encoder instance
//! head.safetensors            classification head
//! tokenizer.json              pretrained backbones only
//! optimizer.safetensors       optional, with trainer.json, for resuming
//! trainer.json
//! MANIFEST                    "<sha256>  <file>" per file, sorted by name
//! ```
//!
//! The model digest is the SHA-256 of `MANIFEST`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Architecture, BackboneAssets, BackboneSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TagModel};
use crate::params::Weights;
use crate::train::{TrainingState, TrainingStateMeta};
use crate::vocab::TagVocabulary;

pub const MANIFEST_FILE: &str = "MANIFEST";
const MODEL_FILE: &str = "model.json";
const VOCAB_FILE: &str = "vocab.tsv";
const HEAD_FILE: &str = "head.safetensors";
const TOKENIZER_FILE: &str = "tokenizer.json";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const TRAINER_FILE: &str = "trainer.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: u32,
    config: ModelConfig,
    backbone: BackboneSpec,
    architecture: Architecture,
    head_shapes: Vec<(String, Vec<usize>)>,
}

fn encoder_file(name: &str) -> String {
    format!("encoder.{name}.safetensors")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: TagModel,
    pub vocab: TagVocabulary,
    pub digest: String,
    pub training: Option<TrainingState>,
}

fn save_tensors(tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    let tensors: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&tensors, path).map_err(|e| Error::checkpoint(path, e.to_string()))
}

/// Writes `model` and `vocab` (plus resumable training state) to `dir`,
/// replacing any previous checkpoint there. Returns the model digest.
pub fn save_checkpoint(
    model: &TagModel,
    vocab: &TagVocabulary,
    dir: &Path,
    training: Option<&TrainingState>,
) -> Result<String> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::VocabWidthMismatch {
            checkpoint: model.config().vocab_size,
            requested: vocab.len(),
        });
    }
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let (_, first) = &model.encoders()[0];
    let mut backbone = first.spec().clone();
    backbone.location = None;
    let head = model.head_snapshot();
    let mut head_shapes: Vec<(String, Vec<usize>)> = head.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect();
    head_shapes.sort();
    let manifest = ModelManifest {
        format: FORMAT_VERSION,
        config: model.config().clone(),
        backbone,
        architecture: first.architecture().clone(),
        head_shapes,
    };
    fs::write(staging.join(MODEL_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(staging.join(VOCAB_FILE), vocab.to_text())?;
    for (name, _) in model.encoders() {
        save_tensors(&model.encoder_snapshot(name), &staging.join(encoder_file(name)))?;
    }
    save_tensors(&head, &staging.join(HEAD_FILE))?;
    if let Some(json) = first.tokenizer().json() {
        fs::write(staging.join(TOKENIZER_FILE), json)?;
    }
    if let Some(state) = training {
        save_tensors(&state.optimizer_tensors, &staging.join(OPTIMIZER_FILE))?;
        fs::write(staging.join(TRAINER_FILE), serde_json::to_string_pretty(&state.meta())?)?;
    }

    let manifest_text = build_manifest(&staging)?;
    fs::write(staging.join(MANIFEST_FILE), &manifest_text)?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(sha256_hex(manifest_text.as_bytes()))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".staging");
    dir.with_file_name(name)
}

fn build_manifest(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_>>()?;
    names.retain(|n| n != MANIFEST_FILE);
    names.sort();
    let mut out = String::new();
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        out.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
    }
    Ok(out)
}

/// Checks every digest listed in `MANIFEST` and returns the model digest.
pub fn verify_checkpoint(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
    let mut listed = Vec::new();
    for line in text.lines() {
        let (digest, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::checkpoint(&manifest_path, format!("bad line {line:?}")))?;
        let bytes = fs::read(dir.join(name)).map_err(|e| Error::checkpoint(dir.join(name), e.to_string()))?;
        if sha256_hex(&bytes) != digest {
            return Err(Error::DigestMismatch { file: name.to_string() });
        }
        listed.push(name.to_string());
    }
    for required in [MODEL_FILE, VOCAB_FILE, HEAD_FILE] {
        if !listed.iter().any(|n| n == required) {
            return Err(Error::checkpoint(dir, format!("{required} not listed in manifest")));
        }
    }
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<Checkpoint> {
    let digest = verify_checkpoint(dir)?;
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_FILE))?)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::checkpoint(
            dir,
            format!("unsupported format {}", manifest.format),
        ));
    }
    let vocab = TagVocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(Error::VocabWidthMismatch {
            checkpoint: manifest.config.vocab_size,
            requested: vocab.len(),
        });
    }
    let tokenizer = match dir.join(TOKENIZER_FILE) {
        p if p.exists() => Some(fs::read_to_string(p)?),
        _ => None,
    };
    let mut encoders = Vec::new();
    for name in manifest.config.encoder_names() {
        let weights = Weights::load(&dir.join(encoder_file(&name)), &Device::Cpu)?;
        encoders.push(BackboneAssets::from_parts(
            manifest.backbone.clone(),
            manifest.architecture.clone(),
            tokenizer.as_deref(),
            weights,
        )?);
    }
    let head = Weights::load(&dir.join(HEAD_FILE), &Device::Cpu)?;
    let model = TagModel::build(manifest.config, &encoders, &head, dtype, device)?;

    let training = if dir.join(TRAINER_FILE).exists() {
        let meta: TrainingStateMeta = serde_json::from_str(&fs::read_to_string(dir.join(TRAINER_FILE))?)?;
        let tensors = candle_core::safetensors::load(dir.join(OPTIMIZER_FILE), &Device::Cpu)?;
        Some(TrainingState {
            config: meta.config,
            step: meta.step,
            total_steps: meta.total_steps,
            step_losses: meta.step_losses,
            optimizer_tensors: tensors,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        vocab,
        digest,
        training,
    })
}

/// Loads a checkpoint that must score exactly `expected_width` tags.
pub fn load_checkpoint_for(dir: &Path, expected_width: usize, dtype: DType, device: &Device) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir, dtype, device)?;
    if ckpt.model.config().vocab_size != expected_width {
        return Err(Error::VocabWidthMismatch {
            checkpoint: ckpt.model.config().vocab_size,
            requested: expected_width,
        });
    }
    Ok(ckpt)
}
