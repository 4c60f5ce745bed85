//! End-to-end fine-tuning: seeded shuffling, AdamW with a linear learning
//! rate schedule, gradient clipping and a per-step JSON log.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{Error, Result};
use crate::model::{bce_loss, clamped_sigmoid, PostTokens, TagModel};
use crate::params::ParamStore;
use crate::vocab::{encode_labels, filter_post, TagVocabulary};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LR: f64 = 7e-5;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub epochs: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub device: String,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            initial_lr: DEFAULT_LR,
            epochs: 1.0,
            warmup_steps: 0,
            seed: DEFAULT_SEED,
            device: "cpu".into(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return Err(Error::InvalidConfig("initial learning rate must be positive".into()));
        }
        if !self.epochs.is_finite() || self.epochs <= 0.0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(Error::InvalidConfig(format!("unsupported device {:?}", self.device)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    /// `ceil(ceil(N / batch) * epochs)`.
    pub fn total_steps(&self, examples: usize) -> usize {
        (self.steps_per_epoch(examples) as f64 * self.epochs).ceil() as usize
    }
}

/// Linear decay to zero at `total`, after an optional linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub initial_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64;
        let w = self.warmup_steps as f64;
        let total = self.total_steps as f64;
        if t < w {
            self.initial_lr * t / w
        } else if total <= w {
            0.0
        } else {
            self.initial_lr * (total - t) / (total - w)
        }
    }
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name
/// so they can be saved and restored.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: usize,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient in `grads`.
    pub fn step(&mut self, store: &ParamStore, grads: &HashMap<String, Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.named() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors as `m.<name>` and `v.<name>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out
    }

    pub fn restore(
        &mut self,
        steps: usize,
        tensors: &HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<()> {
        self.steps = steps;
        self.moments.clear();
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("m.") else { continue };
            let v = tensors
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::InvalidConfig(format!("optimizer state lacks v.{name}")))?;
            self.moments.insert(
                name.to_string(),
                (
                    m.to_dtype(dtype)?.to_device(device)?,
                    v.to_dtype(dtype)?.to_device(device)?,
                ),
            );
        }
        Ok(())
    }
}

/// Gradients of `loss` for every parameter in `store`, by name.
pub fn gradients(store: &ParamStore, loss: &Tensor) -> Result<HashMap<String, Tensor>> {
    let grads = loss.backward()?;
    Ok(store
        .named()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.to_string(), g.clone())))
        .collect())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut total = 0f64;
    for name in names {
        total += grads[name].sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// A pre-tokenized post with its multi-hot labels.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: u64,
    pub tokens: PostTokens,
    pub labels: Vec<f32>,
}

/// Tokenizes and labels `posts`, dropping rare tags and posts left with
/// none.
pub fn prepare_examples(model: &TagModel, posts: &[Post], vocab: &TagVocabulary) -> Result<Vec<TrainingExample>> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::VocabWidthMismatch {
            checkpoint: model.config().vocab_size,
            requested: vocab.len(),
        });
    }
    posts
        .iter()
        .filter_map(|p| filter_post(p, vocab))
        .map(|p| {
            Ok(TrainingExample {
                id: p.id,
                tokens: model.tokenize(&p)?,
                labels: encode_labels(&p.tags, vocab)?.to_f32(),
            })
        })
        .collect()
}

/// The training order for one epoch.
pub fn epoch_order(examples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..examples).collect();
    order.shuffle(&mut rng);
    order
}

fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6472_6f70);
    rng.set_stream(step as u64);
    rng
}

/// Resumable training progress.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub step_losses: Vec<f64>,
    pub optimizer_tensors: HashMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TrainingStateMeta {
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub step_losses: Vec<f64>,
}

impl TrainingState {
    pub(crate) fn meta(&self) -> TrainingStateMeta {
        TrainingStateMeta {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            step_losses: self.step_losses.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct StepRecord {
    step: usize,
    epoch: usize,
    loss: f64,
    lr: f64,
    examples_per_sec: f64,
    grad_norm: f64,
}

/// Receives the state after each epoch, typically to write a checkpoint.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(&TrainingState) -> Result<()>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Per-step JSONL log.
    pub log_path: Option<&'a Path>,
    /// Continue from a saved state.
    pub resume: Option<TrainingState>,
    /// Called after every completed epoch and at the end of training.
    pub on_checkpoint: Option<CheckpointHook<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub step_losses: Vec<f64>,
    /// Mean step loss per (possibly partial) epoch.
    pub epoch_losses: Vec<f64>,
    pub first_batch_ids: Vec<u64>,
}

/// One batch's labels as a `(B, L)` tensor.
fn label_tensor(batch: &[&TrainingExample], dtype: DType, device: &Device) -> Result<Tensor> {
    let l = batch[0].labels.len();
    let flat: Vec<f32> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (batch.len(), l), device)?.to_dtype(dtype)?)
}

/// Loss of the model on a batch, in evaluation mode.
pub fn batch_loss(model: &TagModel, batch: &[&TrainingExample]) -> Result<Tensor> {
    let tokens: Vec<&PostTokens> = batch.iter().map(|e| &e.tokens).collect();
    let probs = clamped_sigmoid(&model.logits(&tokens, None)?)?;
    bce_loss(&probs, &label_tensor(batch, model.dtype(), model.device())?)
}

/// Fine-tunes every parameter of `model` on `examples`.
pub fn train(
    model: &TagModel,
    examples: &[TrainingExample],
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let width = model.config().vocab_size;
    if let Some(bad) = examples.iter().find(|e| e.labels.len() != width) {
        return Err(Error::VocabWidthMismatch {
            checkpoint: width,
            requested: bad.labels.len(),
        });
    }

    let n = examples.len();
    let per_epoch = config.steps_per_epoch(n);
    let total = config.total_steps(n);
    let schedule = LinearSchedule {
        initial_lr: config.initial_lr,
        warmup_steps: config.warmup_steps,
        total_steps: total,
    };
    let mut optimizer = AdamW::new(config);
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(total);
    if let Some(state) = options.resume.take() {
        if state.config != *config || state.total_steps != total {
            return Err(Error::InvalidConfig(
                "resume state was produced by a different configuration".into(),
            ));
        }
        optimizer.restore(state.step, &state.optimizer_tensors, model.dtype(), model.device())?;
        step = state.step;
        step_losses = state.step_losses;
    }

    let mut log = match options.log_path {
        Some(path) => {
            let file = if step > 0 {
                std::fs::OpenOptions::new().append(true).create(true).open(path)?
            } else {
                File::create(path)?
            };
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let first_batch_ids: Vec<u64> = epoch_order(n, config.seed, 0)
        .iter()
        .take(config.batch_size)
        .map(|&i| examples[i].id)
        .collect();

    tracing::info!(examples = n, steps = total, per_epoch, "training");
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while step < total {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(n, config.seed, epoch);
            order_epoch = epoch;
        }
        let start = (step % per_epoch) * config.batch_size;
        let batch: Vec<&TrainingExample> = order[start..(start + config.batch_size).min(n)]
            .iter()
            .map(|&i| &examples[i])
            .collect();

        let clock = Instant::now();
        let tokens: Vec<&PostTokens> = batch.iter().map(|e| &e.tokens).collect();
        let mut rng = dropout_rng(config.seed, step);
        let logits = model.logits(&tokens, Some(&mut rng))?;
        let loss = bce_loss(
            &clamped_sigmoid(&logits)?,
            &label_tensor(&batch, model.dtype(), model.device())?,
        )?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: loss_value,
                post_ids: batch.iter().map(|e| e.id).collect(),
            });
        }
        let mut grads = gradients(model.store(), &loss)?;
        let grad_norm = match config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max)?,
            None => clip_global_norm(&mut grads, f64::INFINITY)?,
        };
        let lr = schedule.lr(step);
        optimizer.step(model.store(), &grads, lr)?;
        step += 1;
        step_losses.push(loss_value);

        let secs = clock.elapsed().as_secs_f64().max(1e-9);
        let record = StepRecord {
            step,
            epoch,
            loss: loss_value,
            lr,
            examples_per_sec: batch.len() as f64 / secs,
            grad_norm,
        };
        if let Some(log) = log.as_mut() {
            serde_json::to_writer(&mut *log, &record)?;
            log.write_all(b"\n")?;
        }
        tracing::debug!(step, loss = loss_value, lr, "step");

        let epoch_done = step % per_epoch == 0 || step == total;
        if epoch_done {
            if let Some(log) = log.as_mut() {
                log.flush()?;
            }
            if let Some(cb) = options.on_checkpoint.as_mut() {
                let state = TrainingState {
                    config: config.clone(),
                    step,
                    total_steps: total,
                    step_losses: step_losses.clone(),
                    optimizer_tensors: optimizer.state_tensors(),
                };
                cb(&state)?;
            }
        }
    }
    if let Some(mut log) = log {
        log.flush()?;
    }

    let epoch_losses = step_losses
        .chunks(per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(TrainOutcome {
        steps: total,
        step_losses,
        epoch_losses,
        first_batch_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let s = LinearSchedule {
            initial_lr: 7e-5,
            warmup_steps: 0,
            total_steps: 10,
        };
        for t in [0usize, 5, 10] {
            let want = 7e-5 * (1.0 - t as f64 / 10.0);
            assert!((s.lr(t) - want).abs() < 1e-18);
        }
        let mut prev = f64::INFINITY;
        for t in 0..=10 {
            assert!(s.lr(t) <= prev);
            prev = s.lr(t);
        }
        let w = LinearSchedule { warmup_steps: 4, ..s };
        assert_eq!(w.lr(0), 0.0);
        assert!((w.lr(4) - 7e-5).abs() < 1e-18);
        assert_eq!(w.lr(10), 0.0);
    }

    #[test]
    fn step_counts() {
        let mut c = TrainConfig::default();
        assert_eq!(c.total_steps(128), 2);
        assert_eq!(c.total_steps(129), 3);
        c.epochs = 5.0;
        assert_eq!(c.total_steps(3000), 235);
        c.epochs = 0.5;
        assert_eq!(c.total_steps(128), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            initial_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            epochs: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shuffles_are_seeded() {
        assert_eq!(epoch_order(100, 7, 0), epoch_order(100, 7, 0));
        assert_ne!(epoch_order(100, 7, 0), epoch_order(100, 8, 0));
        assert_ne!(epoch_order(100, 7, 0), epoch_order(100, 7, 1));
        let mut sorted = epoch_order(100, 7, 3);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        store
            .register("w", &Tensor::new(&[0.5f64, -1.0], &dev).unwrap())
            .unwrap();
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&cfg);
        let mut theta = [0.5f64, -1.0];
        let (mut m, mut v) = ([0f64; 2], [0f64; 2]);
        for t in 1..=3 {
            let g = [0.1 * t as f64, -0.3];
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), Tensor::new(&g, &dev).unwrap());
            opt.step(&store, &grads, 1e-2).unwrap();
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                theta[i] = theta[i] * (1.0 - 1e-2 * 0.01) - 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip(theta) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let dev = Device::Cpu;
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::new(&[3f64, 4.0], &dev).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = grads["a"].to_vec1::<f64>().unwrap();
        assert!(((clipped[0].powi(2) + clipped[1].powi(2)).sqrt() - 1.0).abs() < 1e-5);
    }
}
