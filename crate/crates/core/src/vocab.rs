//! Tag vocabulary: frequency counting, the rare-tag threshold, and the
//! mapping between tag names and label indices.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Post, MAX_TAGS};
use crate::error::{Error, Result};

/// Default rare-tag threshold: tags seen fewer than 50 times are dropped.
pub const DEFAULT_THETA: u64 = 50;

pub type TagCounts = BTreeMap<String, u64>;

pub fn count_tags<'a>(posts: impl IntoIterator<Item = &'a Post>) -> TagCounts {
    let mut counts = TagCounts::new();
    for post in posts {
        for tag in &post.tags {
            *counts.entry(tag.clone()).or_default() += 1;
        }
    }
    counts
}

/// Associative merge for partitioned counting.
pub fn merge_counts(mut into: TagCounts, other: &TagCounts) -> TagCounts {
    for (tag, n) in other {
        *into.entry(tag.clone()).or_default() += n;
    }
    into
}

/// Common tags with dense indices `0..L`, ordered by descending count and
/// then by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    theta: u64,
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

/// Keeps every tag with `count >= theta`.
pub fn build_vocab(counts: &TagCounts, theta: u64) -> Result<TagVocabulary> {
    if theta == 0 {
        return Err(Error::InvalidConfig("theta must be at least 1".into()));
    }
    let mut entries: Vec<(String, u64)> = counts
        .iter()
        .filter(|(_, &n)| n >= theta)
        .map(|(t, &n)| (t.clone(), n))
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyVocabulary { theta });
    }
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(TagVocabulary::from_entries(theta, entries))
}

impl TagVocabulary {
    fn from_entries(theta: u64, entries: Vec<(String, u64)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
        Self { theta, entries, index }
    }

    pub fn theta(&self) -> u64 {
        self.theta
    }

    /// Number of tags, `L`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn count(&self, index: usize) -> u64 {
        self.entries[index].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    /// Text form: a `theta=<int> L=<int>` header, then
    /// `index<TAB>name<TAB>count` per entry in index order.
    pub fn to_text(&self) -> String {
        let mut out = format!("theta={} L={}\n", self.theta, self.len());
        for (i, (tag, n)) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{tag}\t{n}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::MalformedVocabulary(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut theta = None;
        let mut declared = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("theta", v)) => theta = v.parse::<u64>().ok(),
                Some(("L", v)) => declared = v.parse::<usize>().ok(),
                _ => return Err(bad(format!("unexpected header field {field:?}"))),
            }
        }
        let (Some(theta), Some(declared)) = (theta, declared) else {
            return Err(bad(format!("bad header {header:?}")));
        };
        let mut entries = Vec::with_capacity(declared);
        for (expected, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [idx, tag, count] = parts[..] else {
                return Err(bad(format!("bad entry line {line:?}")));
            };
            if idx.parse::<usize>().ok() != Some(expected) {
                return Err(bad(format!("index {idx} out of order")));
            }
            let count = count
                .parse::<u64>()
                .map_err(|_| bad(format!("bad count in {line:?}")))?;
            entries.push((tag.to_string(), count));
        }
        if entries.len() != declared {
            return Err(bad(format!(
                "header declares L={declared}, found {} entries",
                entries.len()
            )));
        }
        if entries.is_empty() {
            return Err(Error::EmptyVocabulary { theta });
        }
        Ok(Self::from_entries(theta, entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Drops rare tags; `None` when nothing common is left.
pub fn filter_post(post: &Post, vocab: &TagVocabulary) -> Option<Post> {
    let tags: Vec<String> = post
        .tags
        .iter()
        .filter(|t| vocab.index_of(t).is_some())
        .cloned()
        .collect();
    if tags.is_empty() {
        return None;
    }
    Some(Post { tags, ..post.clone() })
}

/// Multi-hot encoding of a post's tags over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

pub fn encode_labels<S: AsRef<str>>(tags: &[S], vocab: &TagVocabulary) -> Result<LabelVector> {
    if tags.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut bits = vec![false; vocab.len()];
    for tag in tags {
        let tag = tag.as_ref();
        let i = vocab.index_of(tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
        bits[i] = true;
    }
    if bits.iter().filter(|&&b| b).count() > MAX_TAGS {
        return Err(Error::InvalidConfig(format!("a post has at most {MAX_TAGS} tags")));
    }
    Ok(LabelVector { bits })
}

/// Indices of the `k` highest scores, descending; equal scores keep
/// ascending index order.
pub fn top_k_indices(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if !(1..=MAX_TAGS).contains(&k) || k > scores.len() {
        return Err(Error::InvalidK {
            k,
            limit: scores.len().min(MAX_TAGS),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

pub fn decode_top_k(scores: &[f32], vocab: &TagVocabulary, k: usize) -> Result<Vec<(String, f32)>> {
    if scores.len() != vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for a vocabulary of {}",
            scores.len(),
            vocab.len()
        )));
    }
    Ok(top_k_indices(scores, k)?
        .into_iter()
        .map(|i| (vocab.name(i).to_string(), scores[i]))
        .collect())
}
