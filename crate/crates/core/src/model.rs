//! Component fusion and the tag classification head.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::encoder::{Backbone, BackboneAssets, ComponentEmbedding, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{ParamLoader, ParamStore, Weights};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Width of the optional hidden head layer when enabled without a size.
pub const DEFAULT_HEAD_HIDDEN: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Title,
    Description,
    Code,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Title, Component::Description, Component::Code];

    pub fn name(self) -> &'static str {
        match self {
            Component::Title => "title",
            Component::Description => "description",
            Component::Code => "code",
        }
    }

    pub fn text(self, post: &Post) -> &str {
        match self {
            Component::Title => &post.title,
            Component::Description => &post.description,
            Component::Code => &post.code,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "title" => Ok(Component::Title),
            "description" | "desc" | "body" => Ok(Component::Description),
            "code" => Ok(Component::Code),
            other => Err(Error::InvalidConfig(format!("unknown component {other:?}"))),
        }
    }
}

/// Parses a comma-separated component list.
pub fn parse_components(list: &str) -> Result<Vec<Component>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// The standard variants: the full triplet and the three twins.
pub fn variant_components(variant: &str) -> Result<Vec<Component>> {
    use Component::*;
    match variant {
        "all" => Ok(vec![Title, Description, Code]),
        "notitle" => Ok(vec![Description, Code]),
        "nodesp" | "nodesc" => Ok(vec![Title, Code]),
        "nocode" => Ok(vec![Title, Description]),
        other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HeadConfig {
    /// One hidden ReLU layer of this width in front of the output layer.
    #[serde(default)]
    pub hidden_layer: Option<usize>,
    /// Dropout probability on the head input, applied only in training.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub components: Vec<Component>,
    pub backbone_id: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    #[serde(default)]
    pub head: HeadConfig,
    /// Use one backbone for every component instead of one each.
    #[serde(default)]
    pub share_encoders: bool,
}

impl ModelConfig {
    pub fn new(components: Vec<Component>, backbone_id: &str, vocab_size: usize, hidden_size: usize) -> Self {
        Self {
            components,
            backbone_id: backbone_id.to_string(),
            vocab_size,
            hidden_size,
            head: HeadConfig::default(),
            share_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.components.len()) {
            return Err(Error::InvalidConfig("a model uses two or three components".into()));
        }
        if self.components.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "components must be distinct and ordered title, description, code".into(),
            ));
        }
        if self.vocab_size == 0 || self.hidden_size == 0 {
            return Err(Error::InvalidConfig(
                "vocabulary and hidden sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if self.head.hidden_layer == Some(0) {
            return Err(Error::InvalidConfig("hidden head layer needs a positive width".into()));
        }
        Ok(())
    }

    pub fn is_triplet(&self) -> bool {
        self.components.len() == 3
    }

    /// Width of the fused representation.
    pub fn fused_width(&self) -> usize {
        self.components.len() * self.hidden_size
    }

    /// Names of the encoder instances, which are also parameter prefixes.
    pub fn encoder_names(&self) -> Vec<String> {
        if self.share_encoders {
            vec!["shared".into()]
        } else {
            self.components.iter().map(|c| c.name().to_string()).collect()
        }
    }

    fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.fused_width();
        let l = self.vocab_size;
        match self.head.hidden_layer {
            None => vec![("out.weight".into(), vec![l, d]), ("out.bias".into(), vec![l])],
            Some(m) => vec![
                ("hidden.weight".into(), vec![m, d]),
                ("hidden.bias".into(), vec![m]),
                ("out.weight".into(), vec![l, m]),
                ("out.bias".into(), vec![l]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostRepresentation {
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagProbabilities {
    pub probs: Vec<f32>,
}

/// Concatenates component embeddings in the given order.
pub fn fuse(embeddings: &[ComponentEmbedding], hidden_size: usize) -> Result<PostRepresentation> {
    let mut values = Vec::with_capacity(embeddings.len() * hidden_size);
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != hidden_size {
            return Err(Error::ShapeMismatch(format!(
                "component {i} has width {}, expected {hidden_size}",
                e.len()
            )));
        }
        values.extend_from_slice(&e.values);
    }
    Ok(PostRepresentation { values })
}

/// Sigmoid clamped to `[PROB_EPS, 1 - PROB_EPS]`. Logits are clamped first
/// at the matching points, which gives the same values without overflow.
pub fn clamped_sigmoid(logits: &Tensor) -> Result<Tensor> {
    let bound = ((1.0 - PROB_EPS) / PROB_EPS).ln();
    let z = logits.clamp(-bound, bound)?;
    let p = (z.neg()?.exp()? + 1.0)?.recip()?;
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// `sigmoid(W · rep + b)` for a single-layer head. `weight` is `(L, D)`.
pub fn predict_probabilities(rep: &PostRepresentation, weight: &Tensor, bias: &Tensor) -> Result<TagProbabilities> {
    let (l, d) = weight.dims2()?;
    if rep.values.len() != d || bias.dims1()? != l {
        return Err(Error::ShapeMismatch(format!(
            "head expects width {d} and {l} biases, got representation of {}",
            rep.values.len()
        )));
    }
    let x = Tensor::from_slice(&rep.values, (1, d), weight.device())?.to_dtype(weight.dtype())?;
    let logits = x.matmul(&weight.t()?)?.broadcast_add(bias)?;
    let probs = clamped_sigmoid(&logits)?.squeeze(0)?.to_dtype(DType::F32)?;
    Ok(TagProbabilities {
        probs: probs.to_vec1()?,
    })
}

/// Binary cross-entropy summed over labels and averaged over examples.
/// `probs` and `labels` are `(N, L)`.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.dims() != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dims(),
            labels.dims()
        )));
    }
    let probs = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let labels = labels.to_dtype(probs.dtype())?;
    let pos = labels.mul(&probs.log()?)?;
    let neg = labels.affine(-1.0, 1.0)?.mul(&probs.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.sum(D::Minus1)?.mean(0)?.neg()?)
}

/// Tokenized components of one post, in configured order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostTokens {
    pub components: Vec<TokenSequence>,
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Option<Linear>,
    out: Linear,
    dropout: f64,
}

/// The full model: one backbone per component (or one shared), fusion by
/// concatenation and the head. All parameters live in one [`ParamStore`].
#[derive(Debug)]
pub struct TagModel {
    config: ModelConfig,
    store: ParamStore,
    encoders: Vec<(String, Backbone)>,
    head: Head,
    dtype: DType,
    device: Device,
}

impl TagModel {
    /// A fresh model: backbones from their pretrained weights, a
    /// zero-initialized output layer and a seeded hidden layer if enabled.
    pub fn initialize(
        config: ModelConfig,
        assets: &BackboneAssets,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let mut tensors = HashMap::new();
        for (name, shape) in config.head_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = if name == "hidden.weight" {
                let bound = 1.0 / (shape[1] as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?);
        }
        let head = Weights::new(tensors, "initial head");
        let encoders: Vec<BackboneAssets> = config.encoder_names().iter().map(|_| assets.clone()).collect();
        Self::build(config, &encoders, &head, dtype, device)
    }

    /// Assembles a model from per-encoder assets (in
    /// [`ModelConfig::encoder_names`] order) and head weights.
    pub fn build(
        config: ModelConfig,
        encoders: &[BackboneAssets],
        head: &Weights,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let names = config.encoder_names();
        if encoders.len() != names.len() {
            return Err(Error::InvalidConfig(format!(
                "{} encoder assets for {} encoders",
                encoders.len(),
                names.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, assets) in names.into_iter().zip(encoders) {
            if assets.spec.hidden_size != config.hidden_size {
                return Err(Error::ShapeMismatch(format!(
                    "backbone {} has H={}, model expects {}",
                    assets.spec.identifier, assets.spec.hidden_size, config.hidden_size
                )));
            }
            let prefix = format!("encoder.{name}.");
            let backbone = Backbone::instantiate(assets, &mut store, &prefix, dtype, device)?;
            loaded.push((name, backbone));
        }

        let shapes = config.head_shapes();
        let mut loader = ParamLoader {
            source: head,
            store: &mut store,
            prefix: "head.".into(),
            dtype,
            device: device.clone(),
        };
        let mut params = HashMap::new();
        for (name, shape) in &shapes {
            params.insert(name.as_str(), loader.param(name, shape)?);
        }
        let take = |n: &str| params[n].clone();
        let hidden = config.head.hidden_layer.map(|_| Linear {
            weight: take("hidden.weight"),
            bias: take("hidden.bias"),
        });
        let out = Linear {
            weight: take("out.weight"),
            bias: take("out.bias"),
        };
        let head = Head {
            hidden,
            out,
            dropout: config.head.dropout,
        };
        Ok(Self {
            config,
            store,
            encoders: loaded,
            head,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Encoder instances by name, in configuration order.
    pub fn encoders(&self) -> &[(String, Backbone)] {
        &self.encoders
    }

    fn encoder_for(&self, slot: usize) -> &Backbone {
        if self.config.share_encoders {
            &self.encoders[0].1
        } else {
            &self.encoders[slot].1
        }
    }

    pub fn tokenize(&self, post: &Post) -> Result<PostTokens> {
        let components = self
            .config
            .components
            .iter()
            .enumerate()
            .map(|(slot, c)| self.encoder_for(slot).tokenize_component(c.text(post)))
            .collect::<Result<_>>()?;
        Ok(PostTokens { components })
    }

    /// Fused representations `(B, |components| * H)`.
    pub fn represent(&self, batch: &[&PostTokens]) -> Result<Tensor> {
        let mut pooled = Vec::with_capacity(self.config.components.len());
        for slot in 0..self.config.components.len() {
            let seqs: Vec<&TokenSequence> = batch.iter().map(|p| &p.components[slot]).collect();
            pooled.push(self.encoder_for(slot).encode_batch(&seqs)?);
        }
        Ok(Tensor::cat(&pooled, 1)?)
    }

    /// Head logits `(B, L)`. Dropout applies only when `dropout_rng` is set.
    pub fn logits(&self, batch: &[&PostTokens], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let rep = self.represent(batch)?;
        self.head_logits(&rep, dropout_rng)
    }

    /// Head logits for precomputed fused representations.
    pub fn head_logits(&self, rep: &Tensor, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut x = self.dropout(rep, dropout_rng.as_deref_mut())?;
        if let Some(hidden) = &self.head.hidden {
            x = hidden.forward(&x)?.relu()?;
            x = self.dropout(&x, dropout_rng)?;
        }
        self.head.out.forward(&x)
    }

    fn dropout(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.head.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let scale = 1.0 / (1.0 - p);
                let keep: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
                    .collect();
                let mask = Tensor::from_vec(keep, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok(x.mul(&mask)?)
            }
            _ => Ok(x.clone()),
        }
    }

    /// Clamped probabilities `(B, L)` in evaluation mode.
    pub fn probabilities(&self, batch: &[&PostTokens]) -> Result<Tensor> {
        clamped_sigmoid(&self.logits(batch, None)?)
    }

    pub fn forward(&self, post: &Post) -> Result<TagProbabilities> {
        let tokens = self.tokenize(post)?;
        let probs = self.probabilities(&[&tokens])?.squeeze(0)?.to_dtype(DType::F32)?;
        Ok(TagProbabilities {
            probs: probs.to_vec1()?,
        })
    }

    /// Evaluation-mode probabilities for many posts, `batch_size` at a time.
    pub fn predict_many(&self, posts: &[Post], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(posts.len());
        for chunk in posts.chunks(batch_size.max(1)) {
            let tokens = chunk.iter().map(|p| self.tokenize(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PostTokens> = tokens.iter().collect();
            let probs = self.probabilities(&refs)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            out.extend(probs);
        }
        Ok(out)
    }

    /// Detached head weights, names without the `head.` prefix.
    pub fn head_snapshot(&self) -> HashMap<String, Tensor> {
        self.store.snapshot("head.")
    }

    /// Detached weights of one encoder instance.
    pub fn encoder_snapshot(&self, name: &str) -> HashMap<String, Tensor> {
        self.store.snapshot(&format!("encoder.{name}."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Registry, StubConfig};
    use chrono::TimeZone;
    use std::path::Path;

    fn stub_assets() -> BackboneAssets {
        let spec = Registry::builtin(Path::new("/none")).resolve("stub").unwrap();
        BackboneAssets::resolve(&spec).unwrap()
    }

    fn post(code: &str) -> Post {
        Post {
            id: 1,
            created_at: chrono::Utc.timestamp_opt(0, 0).unwrap(),
            title: "how to sort a list".into(),
            description: "i want to sort numbers".into(),
            code: code.into(),
            tags: vec!["python".into()],
        }
    }

    fn set(model: &TagModel, name: &str, values: Vec<f32>) {
        let var = model.store().get(name).unwrap();
        let t = Tensor::from_vec(values, var.shape(), var.device()).unwrap();
        var.set(&t.to_dtype(var.dtype()).unwrap()).unwrap();
    }

    #[test]
    fn fuse_examples() {
        let e = |v: Vec<f32>| ComponentEmbedding::new(v).unwrap();
        let rep = fuse(&[e(vec![1., 2.]), e(vec![3., 4.])], 2).unwrap();
        assert_eq!(rep.values, vec![1., 2., 3., 4.]);
        assert_eq!(
            fuse(&[e(vec![0.; 768]), e(vec![0.; 768]), e(vec![0.; 768])], 768)
                .unwrap()
                .values
                .len(),
            2304
        );
        assert!(fuse(&[e(vec![1.]), e(vec![1., 2.])], 2).is_err());
    }

    #[test]
    fn probability_examples() {
        let dev = Device::Cpu;
        let rep = PostRepresentation {
            values: vec![0.3, -0.2, 1.0],
        };
        let w = Tensor::zeros((4, 3), DType::F32, &dev).unwrap();
        let b = Tensor::zeros(4, DType::F32, &dev).unwrap();
        assert_eq!(predict_probabilities(&rep, &w, &b).unwrap().probs, vec![0.5; 4]);
        let b = Tensor::new(&[20f32, 0., 0., -20.], &dev).unwrap();
        let p = predict_probabilities(&rep, &w, &b).unwrap().probs;
        assert!((f64::from(p[0]) - (1.0 - PROB_EPS)).abs() < 1e-7);
        assert!((f64::from(p[3]) - PROB_EPS).abs() < 1e-12);
        let narrow = Tensor::zeros((4, 2), DType::F32, &dev).unwrap();
        assert!(predict_probabilities(&rep, &narrow, &b).is_err());
    }

    #[test]
    fn head_matches_scalar_oracle() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, d) = (5, 7);
        let w: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let wt = Tensor::from_vec(w.clone(), (l, d), &dev).unwrap();
        let bt = Tensor::from_vec(b.clone(), l, &dev).unwrap();
        let got = predict_probabilities(&PostRepresentation { values: x.clone() }, &wt, &bt).unwrap();
        for j in 0..l {
            let mut z = b[j];
            for i in 0..d {
                z += w[j * d + i] * f64::from(x[i]);
            }
            let want = (1.0 / (1.0 + (-z).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS);
            assert!((f64::from(got.probs[j]) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_examples() {
        let dev = Device::Cpu;
        let y = Tensor::new(&[[1f64, 0.]], &dev).unwrap();
        let perfect = Tensor::new(&[[1.0 - PROB_EPS, PROB_EPS]], &dev).unwrap();
        let l0 = bce_loss(&perfect, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!(l0.abs() <= 2.0 * PROB_EPS * 2.0);
        let half = Tensor::new(&[[0.5f64, 0.5]], &dev).unwrap();
        let l1 = bce_loss(&half, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((l1 - 2.0 * 2f64.ln()).abs() < 1e-12);
        let y2 = Tensor::new(&[[1f64, 0.], [1., 0.]], &dev).unwrap();
        let half2 = Tensor::new(&[[0.5f64, 0.5], [0.5, 0.5]], &dev).unwrap();
        let l2 = bce_loss(&half2, &y2).unwrap().to_scalar::<f64>().unwrap();
        assert!((l2 - l1).abs() < 1e-12);
        assert!(bce_loss(&half, &y2).is_err());
    }

    #[test]
    fn config_validation() {
        use Component::*;
        assert!(ModelConfig::new(vec![Title, Code], "stub", 3, 16).validate().is_ok());
        assert!(ModelConfig::new(vec![Code, Title], "stub", 3, 16).validate().is_err());
        assert!(ModelConfig::new(vec![Title], "stub", 3, 16).validate().is_err());
        assert!(ModelConfig::new(vec![Title, Title], "stub", 3, 16).validate().is_err());
        assert_eq!(
            parse_components("title,description,code").unwrap(),
            Component::ALL.to_vec()
        );
        assert_eq!(variant_components("nocode").unwrap(), vec![Title, Description]);
        assert!(variant_components("x").is_err());
    }

    #[test]
    fn zero_head_gives_half_and_nocode_ignores_code() {
        let assets = stub_assets();
        let cfg = ModelConfig::new(variant_components("nocode").unwrap(), "stub", 4, 16);
        let model = TagModel::initialize(cfg, &assets, 0, DType::F32, &Device::Cpu).unwrap();
        let p = model.forward(&post("print(1)")).unwrap();
        assert_eq!(p.probs, vec![0.5; 4]);
        set(
            &model,
            "head.out.weight",
            (0..4 * 32).map(|i| (i as f32 * 0.37).sin()).collect(),
        );
        let a = model.forward(&post("print(1)")).unwrap();
        let b = model.forward(&post("import os; os.exit()")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_matches_hand_composition() {
        let assets = stub_assets();
        let cfg = ModelConfig::new(Component::ALL.to_vec(), "stub", 3, 16);
        let model = TagModel::initialize(cfg, &assets, 0, DType::F32, &Device::Cpu).unwrap();
        let w: Vec<f32> = (0..3 * 48).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.1).collect();
        let b = vec![0.1f32, -0.2, 0.3];
        set(&model, "head.out.weight", w.clone());
        set(&model, "head.out.bias", b.clone());

        let p = post("sorted(xs)");
        let got = model.forward(&p).unwrap();

        let encoders = model.encoders();
        let embs: Vec<ComponentEmbedding> = Component::ALL
            .iter()
            .zip(encoders)
            .map(|(c, (_, bb))| bb.encode_component(c.text(&p)).unwrap())
            .collect();
        let rep = fuse(&embs, 16).unwrap();
        let wt = Tensor::from_vec(w, (3, 48), &Device::Cpu).unwrap();
        let bt = Tensor::from_vec(b, 3, &Device::Cpu).unwrap();
        let want = predict_probabilities(&rep, &wt, &bt).unwrap();
        for (g, w) in got.probs.iter().zip(&want.probs) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_encoders_register_once() {
        let assets = stub_assets();
        let mut cfg = ModelConfig::new(Component::ALL.to_vec(), "stub", 3, 16);
        let separate = TagModel::initialize(cfg.clone(), &assets, 0, DType::F32, &Device::Cpu).unwrap();
        cfg.share_encoders = true;
        let shared = TagModel::initialize(cfg, &assets, 0, DType::F32, &Device::Cpu).unwrap();
        let per_encoder = StubConfig::default().buckets * 16 + 16 * 16 + 16;
        assert_eq!(
            separate.store().num_elements() - shared.store().num_elements(),
            2 * per_encoder
        );
        let p = post("x = 1");
        assert_eq!(separate.forward(&p).unwrap(), shared.forward(&p).unwrap());
    }

    #[test]
    fn hidden_layer_and_dropout() {
        let assets = stub_assets();
        let mut cfg = ModelConfig::new(Component::ALL.to_vec(), "stub", 3, 16);
        cfg.head = HeadConfig {
            hidden_layer: Some(8),
            dropout: 0.5,
        };
        let model = TagModel::initialize(cfg, &assets, 9, DType::F32, &Device::Cpu).unwrap();
        set(&model, "head.out.weight", vec![0.5; 24]);
        let tokens = model.tokenize(&post("a")).unwrap();
        let eval1 = model.logits(&[&tokens], None).unwrap().to_vec2::<f32>().unwrap();
        let eval2 = model.logits(&[&tokens], None).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(eval1, eval2);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let t1 = model
            .logits(&[&tokens], Some(&mut r1))
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        let t2 = model
            .logits(&[&tokens], Some(&mut r2))
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(t1, t2);
    }
}
