//! BERT-family encoder stack (BERT, RoBERTa, ALBERT) built on candle-core
//! primitives so that every weight is trainable end to end.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamLoader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformerFamily {
    Bert,
    Roberta,
    Albert,
}

/// The subset of a Hugging Face `config.json` the encoder needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    #[serde(default = "default_family")]
    pub family: TransformerFamily,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub pad_token_id: u32,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    /// ALBERT's factorized embedding width.
    #[serde(default)]
    pub embedding_size: Option<usize>,
}

fn default_family() -> TransformerFamily {
    TransformerFamily::Bert
}
fn default_type_vocab() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_act() -> String {
    "gelu".into()
}

impl TransformerConfig {
    pub fn from_json(text: &str, family: TransformerFamily) -> Result<Self> {
        let mut cfg: TransformerConfig = serde_json::from_str(text)?;
        cfg.family = family;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_attention_heads == 0 {
            return Err(Error::InvalidConfig(
                "hidden size and head count must be positive".into(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if !matches!(
            self.hidden_act.as_str(),
            "gelu" | "gelu_new" | "gelu_pytorch_tanh" | "relu"
        ) {
            return Err(Error::InvalidConfig(format!(
                "unsupported activation {}",
                self.hidden_act
            )));
        }
        Ok(())
    }

    /// Usable sequence length. RoBERTa reserves `pad_token_id + 1` leading
    /// position rows.
    pub fn max_positions(&self) -> usize {
        self.max_position_embeddings - self.position_offset()
    }

    fn position_offset(&self) -> usize {
        match self.family {
            TransformerFamily::Roberta => self.pad_token_id as usize + 1,
            _ => 0,
        }
    }

    fn embedding_width(&self) -> usize {
        match self.family {
            TransformerFamily::Albert => self.embedding_size.unwrap_or(128),
            _ => self.hidden_size,
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn load(loader: &mut ParamLoader<'_>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: loader.param(&format!("{name}.weight"), &[output, input])?,
            bias: loader.param(&format!("{name}.bias"), &[output])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn load(loader: &mut ParamLoader<'_>, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: loader.param(&format!("{name}.weight"), &[width])?,
            bias: loader.param(&format!("{name}.bias"), &[width])?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

impl EncoderLayer {
    fn load_bert(loader: &mut ParamLoader<'_>, cfg: &TransformerConfig, i: usize) -> Result<Self> {
        let p = format!("encoder.layer.{i}");
        let (h, m, eps) = (cfg.hidden_size, cfg.intermediate_size, cfg.layer_norm_eps);
        Ok(Self {
            query: Linear::load(loader, &format!("{p}.attention.self.query"), h, h)?,
            key: Linear::load(loader, &format!("{p}.attention.self.key"), h, h)?,
            value: Linear::load(loader, &format!("{p}.attention.self.value"), h, h)?,
            attn_out: Linear::load(loader, &format!("{p}.attention.output.dense"), h, h)?,
            attn_norm: LayerNorm::load(loader, &format!("{p}.attention.output.LayerNorm"), h, eps)?,
            intermediate: Linear::load(loader, &format!("{p}.intermediate.dense"), h, m)?,
            output: Linear::load(loader, &format!("{p}.output.dense"), m, h)?,
            out_norm: LayerNorm::load(loader, &format!("{p}.output.LayerNorm"), h, eps)?,
        })
    }

    fn load_albert(loader: &mut ParamLoader<'_>, cfg: &TransformerConfig) -> Result<Self> {
        let p = "encoder.albert_layer_groups.0.albert_layers.0";
        let (h, m, eps) = (cfg.hidden_size, cfg.intermediate_size, cfg.layer_norm_eps);
        Ok(Self {
            query: Linear::load(loader, &format!("{p}.attention.query"), h, h)?,
            key: Linear::load(loader, &format!("{p}.attention.key"), h, h)?,
            value: Linear::load(loader, &format!("{p}.attention.value"), h, h)?,
            attn_out: Linear::load(loader, &format!("{p}.attention.dense"), h, h)?,
            attn_norm: LayerNorm::load(loader, &format!("{p}.attention.LayerNorm"), h, eps)?,
            intermediate: Linear::load(loader, &format!("{p}.ffn"), h, m)?,
            output: Linear::load(loader, &format!("{p}.ffn_output"), m, h)?,
            out_norm: LayerNorm::load(loader, &format!("{p}.full_layer_layer_norm"), h, eps)?,
        })
    }

    fn forward(&self, x: &Tensor, attn_bias: &Tensor, heads: usize, act: &str) -> Result<Tensor> {
        let (b, t, h) = x.dims3()?;
        let dh = h / heads;
        let split = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(attn_bias)?;
        let probs = softmax_last(&scores)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, h))?;
        let x = self.attn_norm.forward(&(x + self.attn_out.forward(&ctx)?)?)?;
        let inner = activation(&self.intermediate.forward(&x)?, act)?;
        self.out_norm.forward(&(&x + self.output.forward(&inner)?)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn activation(x: &Tensor, act: &str) -> Result<Tensor> {
    Ok(match act {
        "gelu" => x.gelu_erf()?,
        "relu" => x.relu()?,
        _ => x.gelu()?,
    })
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    cfg: TransformerConfig,
    word: Tensor,
    position: Tensor,
    token_type: Tensor,
    emb_norm: LayerNorm,
    /// ALBERT projects the narrow embedding into the hidden width.
    projection: Option<Linear>,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub(crate) fn load(cfg: &TransformerConfig, loader: &mut ParamLoader<'_>) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embedding_width();
        let word = loader.param("embeddings.word_embeddings.weight", &[cfg.vocab_size, e])?;
        let position = loader.param(
            "embeddings.position_embeddings.weight",
            &[cfg.max_position_embeddings, e],
        )?;
        let token_type = loader.param("embeddings.token_type_embeddings.weight", &[cfg.type_vocab_size, e])?;
        let emb_norm = LayerNorm::load(loader, "embeddings.LayerNorm", e, cfg.layer_norm_eps)?;
        let (projection, layers) = match cfg.family {
            TransformerFamily::Albert => {
                let proj = Linear::load(loader, "encoder.embedding_hidden_mapping_in", e, cfg.hidden_size)?;
                (Some(proj), vec![EncoderLayer::load_albert(loader, cfg)?])
            }
            _ => {
                let layers = (0..cfg.num_hidden_layers)
                    .map(|i| EncoderLayer::load_bert(loader, cfg, i))
                    .collect::<Result<Vec<_>>>()?;
                (None, layers)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            word,
            position,
            token_type,
            emb_norm,
            projection,
            layers,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// `ids`: (batch, seq) u32, `mask`: (batch, seq) in the model dtype with
    /// 1 for real tokens. Returns (batch, seq, H).
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        if t > self.cfg.max_positions() {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {t} exceeds {} positions",
                self.cfg.max_positions()
            )));
        }
        let device = ids.device();
        let e = self.cfg.embedding_width();
        let offset = self.cfg.position_offset() as u32;
        let positions = Tensor::arange(offset, offset + t as u32, device)?;
        let words = self.word.embedding(&ids.flatten_all()?)?.reshape((b, t, e))?;
        let pos = self.position.embedding(&positions)?;
        let types = self.token_type.get(0)?;
        let mut x = words.broadcast_add(&pos)?.broadcast_add(&types)?;
        x = self.emb_norm.forward(&x)?;
        if let Some(proj) = &self.projection {
            x = proj.forward(&x)?;
        }

        let dtype: DType = x.dtype();
        let attn_bias = ((mask.to_dtype(dtype)? - 1.0)? * 1e4)?.reshape((b, 1, 1, t))?;
        let heads = self.cfg.num_attention_heads;
        for i in 0..self.cfg.num_hidden_layers {
            let layer = &self.layers[i.min(self.layers.len() - 1)];
            x = layer.forward(&x, &attn_bias, heads, &self.cfg.hidden_act)?;
        }
        Ok(x)
    }
}

/// Every tensor name the encoder reads, with its shape. Used to generate
/// randomly initialized weight files for tests and smoke runs.
pub fn parameter_shapes(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let (h, m, e) = (cfg.hidden_size, cfg.intermediate_size, cfg.embedding_width());
    let mut shapes = vec![
        ("embeddings.word_embeddings.weight".to_string(), vec![cfg.vocab_size, e]),
        (
            "embeddings.position_embeddings.weight".to_string(),
            vec![cfg.max_position_embeddings, e],
        ),
        (
            "embeddings.token_type_embeddings.weight".to_string(),
            vec![cfg.type_vocab_size, e],
        ),
        ("embeddings.LayerNorm.weight".to_string(), vec![e]),
        ("embeddings.LayerNorm.bias".to_string(), vec![e]),
    ];
    let linear = |shapes: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize| {
        shapes.push((format!("{name}.weight"), vec![o, i]));
        shapes.push((format!("{name}.bias"), vec![o]));
    };
    let layer_names: Vec<[String; 8]> = match cfg.family {
        TransformerFamily::Albert => {
            linear(&mut shapes, "encoder.embedding_hidden_mapping_in".into(), e, h);
            let p = "encoder.albert_layer_groups.0.albert_layers.0";
            vec![[
                format!("{p}.attention.query"),
                format!("{p}.attention.key"),
                format!("{p}.attention.value"),
                format!("{p}.attention.dense"),
                format!("{p}.attention.LayerNorm"),
                format!("{p}.ffn"),
                format!("{p}.ffn_output"),
                format!("{p}.full_layer_layer_norm"),
            ]]
        }
        _ => (0..cfg.num_hidden_layers)
            .map(|i| {
                let p = format!("encoder.layer.{i}");
                [
                    format!("{p}.attention.self.query"),
                    format!("{p}.attention.self.key"),
                    format!("{p}.attention.self.value"),
                    format!("{p}.attention.output.dense"),
                    format!("{p}.attention.output.LayerNorm"),
                    format!("{p}.intermediate.dense"),
                    format!("{p}.output.dense"),
                    format!("{p}.output.LayerNorm"),
                ]
            })
            .collect(),
    };
    for [q, k, v, o, ln1, inter, out, ln2] in layer_names {
        linear(&mut shapes, q, h, h);
        linear(&mut shapes, k, h, h);
        linear(&mut shapes, v, h, h);
        linear(&mut shapes, o, h, h);
        linear(&mut shapes, inter, h, m);
        linear(&mut shapes, out, m, h);
        for ln in [ln1, ln2] {
            shapes.push((format!("{ln}.weight"), vec![h]));
            shapes.push((format!("{ln}.bias"), vec![h]));
        }
    }
    shapes
}
