//! Synthetic, noise-free tagging tasks for end-to-end checks.
//!
//! Thirty tags are split evenly between the three components. Each tag has
//! one planted keyword that appears only in its component, and a post
//! carries a tag exactly when its keyword is present. Keywords within a
//! component are chosen so the stub backbone maps them to distinct feature
//! slots, and filler words use the slots left over.

use std::collections::BTreeSet;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Post, MAX_TAGS};
use crate::encoder::stub::{feature_slot, StubConfig};
use crate::error::{Error, Result};
use crate::model::Component;
use crate::vocab::{top_k_indices, TagVocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub posts: usize,
    pub tags_per_component: usize,
    pub tags_per_post: usize,
    /// Filler words per component, inclusive range.
    pub fillers: (usize, usize),
    pub seed: u64,
    pub first_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            posts: 3000,
            tags_per_component: 10,
            tags_per_post: MAX_TAGS,
            fillers: (1, 4),
            seed: 1,
            first_id: 1,
        }
    }
}

/// A tag and the keyword that implies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedTag {
    pub name: String,
    pub component: Component,
    pub keyword: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub tags: Vec<PlantedTag>,
    fillers: Vec<Vec<String>>,
    config: SynthConfig,
}

const FILLERS_PER_COMPONENT: usize = 6;

fn prefix(c: Component) -> &'static str {
    match c {
        Component::Title => "t",
        Component::Description => "d",
        Component::Code => "c",
    }
}

impl SyntheticTask {
    pub fn new(config: SynthConfig) -> Result<Self> {
        let stub = StubConfig::default();
        let word_slots = stub.hidden_size - 2;
        if config.tags_per_component > word_slots {
            return Err(Error::InvalidConfig(format!(
                "at most {word_slots} separable keywords per component"
            )));
        }
        if config.tags_per_post == 0
            || config.tags_per_post > MAX_TAGS
            || config.tags_per_post > 3 * config.tags_per_component
        {
            return Err(Error::InvalidConfig("tags per post out of range".into()));
        }
        if config.fillers.0 > config.fillers.1 {
            return Err(Error::InvalidConfig("filler range is empty".into()));
        }
        let mut tags = Vec::new();
        let mut fillers = Vec::new();
        for component in Component::ALL {
            let p = prefix(component);
            let mut used = BTreeSet::new();
            let mut candidates = (0..).map(|j| format!("{p}kw{j}"));
            for i in 0..config.tags_per_component {
                let keyword = candidates
                    .by_ref()
                    .find(|w| feature_slot(w, &stub).is_some_and(|s| used.insert(s)))
                    .expect("unbounded candidates");
                tags.push(PlantedTag {
                    name: format!("{}-{i:02}", component.name()),
                    component,
                    keyword,
                });
            }
            let free: Vec<String> = (0..)
                .map(|j| format!("fill{p}{j}"))
                .filter(|w| feature_slot(w, &stub).is_some_and(|s| !used.contains(&s)))
                .take(FILLERS_PER_COMPONENT)
                .collect();
            fillers.push(free);
        }
        Ok(Self { tags, fillers, config })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Names of the tags whose keyword lives in `component`.
    pub fn tags_of(&self, component: Component) -> Vec<String> {
        self.tags
            .iter()
            .filter(|t| t.component == component)
            .map(|t| t.name.clone())
            .collect()
    }

    /// Generates `config.posts` posts with increasing timestamps.
    pub fn generate(&self) -> Vec<Post> {
        self.generate_range(self.config.first_id, self.config.posts, self.config.seed)
    }

    /// `count` posts with ids from `first_id`, drawn from `seed`.
    pub fn generate_range(&self, first_id: u64, count: usize, seed: u64) -> Vec<Post> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let indices: Vec<usize> = (0..self.tags.len()).collect();
        (0..count)
            .map(|i| {
                let id = first_id + i as u64;
                let chosen: Vec<usize> = indices.sample(&mut rng, self.config.tags_per_post).copied().collect();
                let mut texts = Vec::with_capacity(3);
                for (slot, component) in Component::ALL.iter().enumerate() {
                    let mut words: Vec<&str> = chosen
                        .iter()
                        .filter(|&&t| self.tags[t].component == *component)
                        .map(|&t| self.tags[t].keyword.as_str())
                        .collect();
                    let (lo, hi) = self.config.fillers;
                    let n = rng.random_range(lo..=hi);
                    for _ in 0..n {
                        words.push(self.fillers[slot].choose(&mut rng).expect("fillers exist"));
                    }
                    words.shuffle(&mut rng);
                    texts.push(words.join(" "));
                }
                let code = texts.pop().unwrap_or_default();
                let description = texts.pop().unwrap_or_default();
                let title = texts.pop().unwrap_or_default();
                Post {
                    id,
                    created_at: start + Duration::minutes(id as i64),
                    title,
                    description,
                    code,
                    tags: chosen.iter().map(|&t| self.tags[t].name.clone()).collect(),
                }
            })
            .collect()
    }
}

/// Fraction of ground-truth tags from `subset` that appear in the top k,
/// pooled over all posts.
pub fn subset_hit_rate(
    posts: &[Post],
    scores: &[Vec<f32>],
    vocab: &TagVocabulary,
    subset: &[String],
    k: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (post, s) in posts.iter().zip(scores) {
        let top: BTreeSet<usize> = top_k_indices(s, k)?.into_iter().collect();
        for tag in post.tags.iter().filter(|t| subset.contains(t)) {
            total += 1;
            if vocab.index_of(tag).is_some_and(|i| top.contains(&i)) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}
