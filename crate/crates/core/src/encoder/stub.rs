//! Offline test backbone.
//!
//! Tokens are hashed into a fixed bucket space. Each bucket's embedding is a
//! hash-selected unit feature (one of `H - 2` slots; the two remaining slots
//! belong to the begin/end specials) plus small seeded noise, followed by a
//! single identity-initialized linear mixing layer. Everything is derived
//! from [`STUB_SEED`], so two loads produce bit-identical weights.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamLoader, Weights};

pub const STUB_SEED: u64 = 0x7461_6766_6f72_6765;
pub const STUB_HIDDEN: usize = 16;
pub const STUB_BUCKETS: usize = 8192;

pub const PAD_ID: u32 = 0;
pub const BEGIN_ID: u32 = 1;
pub const END_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

const BEGIN_SLOT: usize = 0;
const END_SLOT: usize = 1;
const NOISE: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubConfig {
    pub buckets: usize,
    pub hidden_size: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            buckets: STUB_BUCKETS,
            hidden_size: STUB_HIDDEN,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Lower-cases and splits into word tokens (alphanumerics and `_`) and
/// single punctuation characters.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn token_id(piece: &str, config: &StubConfig) -> u32 {
    let span = (config.buckets as u64) - u64::from(FIRST_WORD_ID);
    FIRST_WORD_ID + (fnv1a(piece.as_bytes()) % span) as u32
}

pub fn tokenize(text: &str, config: &StubConfig) -> Vec<u32> {
    pieces(text).iter().map(|p| token_id(p, config)).collect()
}

/// The feature slot a token id activates in the initial embedding table.
pub fn slot_of_id(id: u32, config: &StubConfig) -> Option<usize> {
    match id {
        PAD_ID => None,
        BEGIN_ID => Some(BEGIN_SLOT),
        END_ID => Some(END_SLOT),
        _ => {
            let word_slots = (config.hidden_size - 2) as u64;
            Some(2 + (splitmix(u64::from(id)) % word_slots) as usize)
        }
    }
}

/// The feature slot a single-piece word activates, e.g. for choosing words
/// the stub can tell apart.
pub fn feature_slot(word: &str, config: &StubConfig) -> Option<usize> {
    match pieces(word).as_slice() {
        [single] => slot_of_id(token_id(single, config), config),
        _ => None,
    }
}

/// The generated "pretrained" weights.
pub fn initial_weights(config: &StubConfig) -> Result<Weights> {
    let (v, h) = (config.buckets, config.hidden_size);
    let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
    let mut table = vec![0f32; v * h];
    for id in 0..v {
        let row = &mut table[id * h..(id + 1) * h];
        if id as u32 == PAD_ID {
            continue;
        }
        for x in row.iter_mut() {
            *x = rng.random_range(-NOISE..NOISE);
        }
        if let Some(slot) = slot_of_id(id as u32, config) {
            row[slot] += 1.0;
        }
    }
    let mut eye = vec![0f32; h * h];
    for i in 0..h {
        eye[i * h + i] = 1.0;
    }
    let dev = Device::Cpu;
    let mut tensors = HashMap::new();
    tensors.insert("embeddings.weight".to_string(), Tensor::from_vec(table, (v, h), &dev)?);
    tensors.insert("mixing.weight".to_string(), Tensor::from_vec(eye, (h, h), &dev)?);
    tensors.insert("mixing.bias".to_string(), Tensor::zeros(h, DType::F32, &dev)?);
    Ok(Weights::new(tensors, "stub"))
}

#[derive(Debug, Clone)]
pub struct StubEncoder {
    embeddings: Tensor,
    mixing_weight: Tensor,
    mixing_bias: Tensor,
}

impl StubEncoder {
    pub(crate) fn load(config: &StubConfig, loader: &mut ParamLoader<'_>) -> Result<Self> {
        let (v, h) = (config.buckets, config.hidden_size);
        Ok(Self {
            embeddings: loader.param("embeddings.weight", &[v, h])?,
            mixing_weight: loader.param("mixing.weight", &[h, h])?,
            mixing_bias: loader.param("mixing.bias", &[h])?,
        })
    }

    /// `ids`: (batch, seq) u32 → (batch, seq, H).
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let h = self.mixing_bias.dim(0)?;
        let emb = self.embeddings.embedding(&ids.flatten_all()?)?;
        let mixed = emb.matmul(&self.mixing_weight.t()?)?.broadcast_add(&self.mixing_bias)?;
        Ok(mixed.reshape((b, t, h))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_split_words_and_punctuation() {
        assert_eq!(pieces("Hello, World_2!"), vec!["hello", ",", "world_2", "!"]);
        assert!(pieces("  ").is_empty());
    }

    #[test]
    fn ids_avoid_specials() {
        let cfg = StubConfig::default();
        for p in ["a", "b", "print", "(", "ä"] {
            let id = token_id(p, &cfg);
            assert!(id >= FIRST_WORD_ID && (id as usize) < cfg.buckets);
        }
    }

    #[test]
    fn weights_are_reproducible() {
        let cfg = StubConfig::default();
        let a = initial_weights(&cfg).unwrap();
        let b = initial_weights(&cfg).unwrap();
        let dev = Device::Cpu;
        let ta = a
            .get("embeddings.weight", &[cfg.buckets, cfg.hidden_size], DType::F32, &dev)
            .unwrap();
        let tb = b
            .get("embeddings.weight", &[cfg.buckets, cfg.hidden_size], DType::F32, &dev)
            .unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn word_slots_skip_special_slots() {
        let cfg = StubConfig::default();
        for id in 3..500u32 {
            let slot = slot_of_id(id, &cfg).unwrap();
            assert!((2..cfg.hidden_size).contains(&slot));
        }
        assert_eq!(feature_slot("two words", &cfg), None);
    }
}
