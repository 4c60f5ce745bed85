//! Per-component text encoders: tokenization with head-only truncation,
//! the backbone forward pass and masked average pooling.

pub mod registry;
pub mod stub;
pub mod transformer;

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamLoader, ParamStore, Weights};

pub use registry::{default_cache_dir, BackboneFamily, BackboneSpec, Registry, MAX_POSITIONS};
pub use stub::StubConfig;
pub use transformer::{TransformerConfig, TransformerFamily};

pub const CONFIG_FILE: &str = "config.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

/// Backbone architecture hyperparameters, stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Stub(StubConfig),
    Transformer(TransformerConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub begin: u32,
    pub end: u32,
    pub pad: u32,
}

/// Maps text to raw subtoken ids, without specials.
#[derive(Clone)]
pub enum ComponentTokenizer {
    Stub(StubConfig),
    Pretrained {
        inner: Box<tokenizers::Tokenizer>,
        json: String,
        specials: Specials,
    },
}

impl std::fmt::Debug for ComponentTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Stub(cfg) => f.debug_tuple("Stub").field(cfg).finish(),
            Self::Pretrained { specials, .. } => f.debug_struct("Pretrained").field("specials", specials).finish(),
        }
    }
}

const SPECIAL_NAMES: &[(&str, &str, &str)] = &[("[CLS]", "[SEP]", "[PAD]"), ("<s>", "</s>", "<pad>")];

impl ComponentTokenizer {
    /// Parses a `tokenizer.json`. Truncation and padding configured in the
    /// file are disabled; both are handled here.
    pub fn from_json(json: &str) -> Result<Self> {
        let mut inner: tokenizers::Tokenizer = json.parse().map_err(Error::tokenizer)?;
        inner.with_padding(None);
        inner.with_truncation(None).map_err(Error::tokenizer)?;
        let specials = SPECIAL_NAMES
            .iter()
            .find_map(|(b, e, p)| {
                Some(Specials {
                    begin: inner.token_to_id(b)?,
                    end: inner.token_to_id(e)?,
                    pad: inner.token_to_id(p)?,
                })
            })
            .ok_or_else(|| Error::Tokenizer("no [CLS]/[SEP]/[PAD] or <s>/</s>/<pad> tokens".into()))?;
        Ok(Self::Pretrained {
            inner: Box::new(inner),
            json: json.to_string(),
            specials,
        })
    }

    pub fn specials(&self) -> Specials {
        match self {
            Self::Stub(_) => Specials {
                begin: stub::BEGIN_ID,
                end: stub::END_ID,
                pad: stub::PAD_ID,
            },
            Self::Pretrained { specials, .. } => *specials,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Self::Stub(cfg) => Ok(stub::tokenize(text, cfg)),
            Self::Pretrained { inner, .. } => {
                let enc = inner.encode(text, false).map_err(Error::tokenizer)?;
                Ok(enc.get_ids().to_vec())
            }
        }
    }

    /// The serialized tokenizer for pretrained backbones.
    pub fn json(&self) -> Option<&str> {
        match self {
            Self::Stub(_) => None,
            Self::Pretrained { json, .. } => Some(json),
        }
    }
}

/// Specials-framed subtoken ids for one component, unpadded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    /// Keeps the first `limit` raw ids and frames them with the specials.
    pub fn frame(raw: &[u32], limit: usize, specials: Specials) -> Self {
        let kept = &raw[..raw.len().min(limit)];
        let mut ids = Vec::with_capacity(kept.len() + 2);
        ids.push(specials.begin);
        ids.extend_from_slice(kept);
        ids.push(specials.end);
        let mask = vec![1; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Right-padded sequences as tensors: ids `(B, T)` u32, mask `(B, T)`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Tensor,
    pub mask: Tensor,
}

impl TokenBatch {
    pub fn assemble(seqs: &[&TokenSequence], pad: u32, dtype: DType, device: &Device) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(pad, width - s.len()));
            mask.extend(s.mask.iter().map(|&m| f32::from(m)));
            mask.extend(std::iter::repeat_n(0.0, width - s.len()));
        }
        let shape = (seqs.len(), width);
        Ok(Self {
            ids: Tensor::from_vec(ids, shape, device)?,
            mask: Tensor::from_vec(mask, shape, device)?.to_dtype(dtype)?,
        })
    }
}

/// A fixed-size pooled component vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentEmbedding {
    pub values: Vec<f32>,
}

impl ComponentEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(
                "component embedding has non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean over masked positions: hidden `(B, T, H)`, mask `(B, T)` → `(B, H)`.
/// Every row must have at least one set mask bit.
pub fn masked_mean(hidden: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(hidden.dtype())?;
    let counts = mask.sum_keepdim(1)?;
    let min = counts.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if min < 0.5 {
        return Err(Error::EmptyMask);
    }
    let summed = hidden.broadcast_mul(&mask.unsqueeze(2)?)?.sum(1)?;
    Ok(summed.broadcast_div(&counts)?)
}

/// Mean of the rows of `hidden` (`(T, H)`) whose mask bit is set.
pub fn average_pool(hidden: &Tensor, mask: &[u8]) -> Result<ComponentEmbedding> {
    let (t, _) = hidden.dims2()?;
    if mask.len() != t {
        return Err(Error::ShapeMismatch(format!("mask of {} for {t} rows", mask.len())));
    }
    if mask.iter().all(|&m| m == 0) {
        return Err(Error::EmptyMask);
    }
    let m: Vec<f32> = mask.iter().map(|&b| f32::from(b.min(1))).collect();
    let m = Tensor::from_vec(m, (1, t), hidden.device())?;
    let pooled = masked_mean(&hidden.unsqueeze(0)?, &m)?.squeeze(0)?;
    ComponentEmbedding::new(pooled.to_dtype(DType::F32)?.to_vec1()?)
}

#[derive(Debug, Clone)]
enum EncoderImpl {
    Stub(stub::StubEncoder),
    Transformer(transformer::TransformerEncoder),
}

/// Everything needed to instantiate a backbone: tokenizer, architecture
/// and starting weights.
#[derive(Debug, Clone)]
pub struct BackboneAssets {
    pub spec: BackboneSpec,
    pub tokenizer: Arc<ComponentTokenizer>,
    pub architecture: Architecture,
    pub weights: Weights,
}

impl BackboneAssets {
    /// Resolves pretrained files, or generates the stub.
    pub fn resolve(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        match spec.family {
            BackboneFamily::Stub => {
                let cfg = StubConfig {
                    hidden_size: spec.hidden_size,
                    ..StubConfig::default()
                };
                Ok(Self {
                    spec: spec.clone(),
                    tokenizer: Arc::new(ComponentTokenizer::Stub(cfg)),
                    architecture: Architecture::Stub(cfg),
                    weights: stub::initial_weights(&cfg)?,
                })
            }
            family => {
                let dir = spec
                    .location
                    .clone()
                    .unwrap_or_else(|| default_cache_dir().join(&spec.identifier));
                let unavailable = |reason: String| Error::WeightsUnavailable {
                    id: spec.identifier.clone(),
                    path: dir.clone(),
                    reason,
                };
                let read = |name: &str| {
                    std::fs::read_to_string(dir.join(name)).map_err(|e| unavailable(format!("{name}: {e}")))
                };
                let config = read(CONFIG_FILE)?;
                let tokenizer = read(TOKENIZER_FILE)?;
                let weights_path = dir.join(WEIGHTS_FILE);
                if !weights_path.is_file() {
                    return Err(unavailable(format!("{WEIGHTS_FILE} not found")));
                }
                let tf_family = match family {
                    BackboneFamily::Roberta => TransformerFamily::Roberta,
                    BackboneFamily::Albert => TransformerFamily::Albert,
                    _ => TransformerFamily::Bert,
                };
                let arch = TransformerConfig::from_json(&config, tf_family)?;
                if arch.hidden_size != spec.hidden_size {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: config hidden size {} but registry says {}",
                        spec.identifier, arch.hidden_size, spec.hidden_size
                    )));
                }
                Self::from_parts(
                    spec.clone(),
                    Architecture::Transformer(arch),
                    Some(&tokenizer),
                    Weights::load(&weights_path, &Device::Cpu)?,
                )
            }
        }
    }

    /// Assembles assets from already-loaded parts. `tokenizer_json` is
    /// required for transformer architectures.
    pub fn from_parts(
        spec: BackboneSpec,
        architecture: Architecture,
        tokenizer_json: Option<&str>,
        weights: Weights,
    ) -> Result<Self> {
        let tokenizer = match (&architecture, tokenizer_json) {
            (Architecture::Stub(cfg), _) => ComponentTokenizer::Stub(*cfg),
            (Architecture::Transformer(_), Some(json)) => ComponentTokenizer::from_json(json)?,
            (Architecture::Transformer(_), None) => {
                return Err(Error::Tokenizer(format!("{}: tokenizer missing", spec.identifier)))
            }
        };
        Ok(Self {
            spec,
            tokenizer: Arc::new(tokenizer),
            architecture,
            weights,
        })
    }
}

/// A loaded encoder. Cloning is cheap and shares parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    architecture: Architecture,
    tokenizer: Arc<ComponentTokenizer>,
    encoder: EncoderImpl,
    dtype: DType,
    device: Device,
}

impl Backbone {
    /// Registers the backbone's parameters in `store` under `prefix`.
    pub fn instantiate(
        assets: &BackboneAssets,
        store: &mut ParamStore,
        prefix: &str,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut loader = ParamLoader {
            source: &assets.weights,
            store,
            prefix: prefix.to_string(),
            dtype,
            device: device.clone(),
        };
        let (encoder, max_positions) = match &assets.architecture {
            Architecture::Stub(cfg) => (
                EncoderImpl::Stub(stub::StubEncoder::load(cfg, &mut loader)?),
                assets.spec.max_positions,
            ),
            Architecture::Transformer(cfg) => (
                EncoderImpl::Transformer(transformer::TransformerEncoder::load(cfg, &mut loader)?),
                assets.spec.max_positions.min(cfg.max_positions()),
            ),
        };
        let mut spec = assets.spec.clone();
        spec.max_positions = max_positions;
        spec.validate()?;
        Ok(Self {
            spec,
            architecture: assets.architecture.clone(),
            tokenizer: assets.tokenizer.clone(),
            encoder,
            dtype,
            device: device.clone(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn hidden_size(&self) -> usize {
        self.spec.hidden_size
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn tokenizer(&self) -> &ComponentTokenizer {
        &self.tokenizer
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Raw subtoken ids, untruncated and without specials.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.encode(text)
    }

    pub fn tokenize_component(&self, text: &str) -> Result<TokenSequence> {
        let raw = self.tokenize(text)?;
        Ok(TokenSequence::frame(
            &raw,
            self.spec.content_limit(),
            self.tokenizer.specials(),
        ))
    }

    pub fn assemble(&self, seqs: &[&TokenSequence]) -> Result<TokenBatch> {
        TokenBatch::assemble(seqs, self.tokenizer.specials().pad, self.dtype, &self.device)
    }

    /// Per-token hidden states `(B, T, H)`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        match &self.encoder {
            EncoderImpl::Stub(enc) => enc.forward(&batch.ids),
            EncoderImpl::Transformer(enc) => enc.forward(&batch.ids, &batch.mask),
        }
    }

    /// Pooled embeddings `(B, H)` for already tokenized sequences.
    pub fn encode_batch(&self, seqs: &[&TokenSequence]) -> Result<Tensor> {
        let batch = self.assemble(seqs)?;
        masked_mean(&self.forward(&batch)?, &batch.mask)
    }

    pub fn encode_component(&self, text: &str) -> Result<ComponentEmbedding> {
        let seq = self.tokenize_component(text)?;
        let batch = self.assemble(&[&seq])?;
        let hidden = self.forward(&batch)?.squeeze(0)?;
        average_pool(&hidden, &seq.mask)
    }
}

/// Resolves `identifier` and loads it into a private parameter store.
pub fn load_backbone(identifier: &str, registry: &Registry) -> Result<Backbone> {
    let spec = registry.resolve(identifier)?;
    let assets = BackboneAssets::resolve(&spec)?;
    let mut store = ParamStore::new();
    Backbone::instantiate(&assets, &mut store, "", DType::F32, &Device::Cpu)
}

/// Writes `config.json`, `tokenizer.json` and `model.safetensors` for a
/// randomly initialized transformer, laid out like a pretrained download.
/// Used for smoke tests that cannot reach real weights.
pub fn write_random_transformer(dir: &Path, config: &TransformerConfig, tokenizer_json: &str, seed: u64) -> Result<()> {
    use rand::{RngExt, SeedableRng};
    std::fs::create_dir_all(dir)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = std::collections::HashMap::new();
    for (name, shape) in transformer::parameter_shapes(config) {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = if name.ends_with("LayerNorm.weight") || name.ends_with("layer_norm.weight") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.random_range(-0.05f32..0.05)).collect()
        };
        tensors.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?);
    }
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    std::fs::write(dir.join(TOKENIZER_FILE), tokenizer_json)?;
    Ok(())
}

/// A small WordPiece `tokenizer.json` over `words`, BERT-style specials
/// first. Lower-cases and splits on whitespace and punctuation.
pub fn wordpiece_tokenizer_json(words: &[&str]) -> String {
    let mut vocab = serde_json::Map::new();
    for (i, w) in ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        .iter()
        .chain(words)
        .enumerate()
    {
        vocab.insert((*w).to_string(), serde_json::json!(i));
    }
    serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": [],
        "normalizer": {"type": "BertNormalizer", "clean_text": true, "handle_chinese_chars": true,
                        "strip_accents": null, "lowercase": true},
        "pre_tokenizer": {"type": "BertPreTokenizer"},
        "post_processor": null,
        "decoder": null,
        "model": {"type": "WordPiece", "unk_token": "[UNK]", "continuing_subword_prefix": "##",
                   "max_input_chars_per_word": 100, "vocab": vocab}
    })
    .to_string()
}
