//! Precision, recall and F1 at k, corpus averaging and variant comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde_json::{Map, Value};

use crate::corpus::{Post, MAX_TAGS};
use crate::error::{Error, Result};
use crate::model::TagModel;
use crate::vocab::{filter_post, top_k_indices, TagVocabulary};

/// Largest k reported.
pub const MAX_K: usize = MAX_TAGS;

/// One test post: its ground-truth tag indices and the model's ranking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    ground_truth: BTreeSet<usize>,
    ranked: Vec<usize>,
}

impl EvalCase {
    pub fn new(ground_truth: impl IntoIterator<Item = usize>, ranked: Vec<usize>) -> Result<Self> {
        let ground_truth: BTreeSet<usize> = ground_truth.into_iter().collect();
        if ground_truth.is_empty() || ground_truth.len() > MAX_TAGS {
            return Err(Error::InvalidConfig(format!(
                "ground truth must hold 1..={MAX_TAGS} tags, got {}",
                ground_truth.len()
            )));
        }
        let distinct: BTreeSet<usize> = ranked.iter().copied().collect();
        if distinct.len() != ranked.len() {
            return Err(Error::InvalidConfig("ranking contains duplicates".into()));
        }
        Ok(Self { ground_truth, ranked })
    }

    pub fn ground_truth(&self) -> &BTreeSet<usize> {
        &self.ground_truth
    }

    pub fn ranked(&self) -> &[usize] {
        &self.ranked
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if !(1..=MAX_K).contains(&k) || k > self.ranked.len() {
            return Err(Error::InvalidK {
                k,
                limit: self.ranked.len().min(MAX_K),
            });
        }
        Ok(())
    }

    /// Ground-truth tags among the top k.
    pub fn hits(&self, k: usize) -> Result<usize> {
        self.check_k(k)?;
        Ok(self.ranked[..k]
            .iter()
            .filter(|t| self.ground_truth.contains(t))
            .count())
    }
}

pub fn precision_at_k(case: &EvalCase, k: usize) -> Result<f64> {
    Ok(case.hits(k)? as f64 / k as f64)
}

/// Hits over `min(k, |GT|)`, so posts with fewer than k tags can reach 1.
pub fn recall_at_k(case: &EvalCase, k: usize) -> Result<f64> {
    let hits = case.hits(k)?;
    Ok(hits as f64 / k.min(case.ground_truth.len()) as f64)
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1_at_k(case: &EvalCase, k: usize) -> Result<f64> {
    Ok(f1(precision_at_k(case, k)?, recall_at_k(case, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoresAtK {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus means for k = 1..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Index `k - 1`.
    pub at_k: [ScoresAtK; MAX_K],
    pub n_cases: usize,
    pub model_digest: Option<String>,
}

impl MetricsReport {
    /// Averages per-case metrics. Every case must rank at least five tags.
    pub fn from_cases(cases: &[EvalCase], model_digest: Option<String>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sums = [ScoresAtK::default(); MAX_K];
        for case in cases {
            for (i, s) in sums.iter_mut().enumerate() {
                let k = i + 1;
                s.precision += precision_at_k(case, k)?;
                s.recall += recall_at_k(case, k)?;
                s.f1 += f1_at_k(case, k)?;
            }
        }
        let n = cases.len() as f64;
        let at_k = sums.map(|s| ScoresAtK {
            precision: s.precision / n,
            recall: s.recall / n,
            f1: s.f1 / n,
        });
        Ok(Self {
            at_k,
            n_cases: cases.len(),
            model_digest,
        })
    }

    pub fn get(&self, k: usize) -> ScoresAtK {
        self.at_k[k - 1]
    }

    /// Keys `precision@k`, `recall@k`, `f1@k`, then `n_cases` and
    /// `model_digest`, in that order.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (metric, pick) in METRICS {
            for (i, s) in self.at_k.iter().enumerate() {
                map.insert(format!("{metric}@{}", i + 1), Value::from(pick(s)));
            }
        }
        map.insert("n_cases".into(), Value::from(self.n_cases));
        map.insert(
            "model_digest".into(),
            self.model_digest.clone().map(Value::from).unwrap_or(Value::Null),
        );
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let field = |key: &str| {
            value
                .get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::InvalidConfig(format!("report lacks {key}")))
        };
        let mut at_k = [ScoresAtK::default(); MAX_K];
        for (i, s) in at_k.iter_mut().enumerate() {
            let k = i + 1;
            s.precision = field(&format!("precision@{k}"))?;
            s.recall = field(&format!("recall@{k}"))?;
            s.f1 = field(&format!("f1@{k}"))?;
        }
        Ok(Self {
            at_k,
            n_cases: field("n_cases")? as usize,
            model_digest: value.get("model_digest").and_then(Value::as_str).map(String::from),
        })
    }

    /// Rows are metrics, columns are k.
    pub fn table(&self) -> String {
        let mut out = String::from("metric     ");
        for k in 1..=MAX_K {
            let _ = write!(out, "  @{k}    ");
        }
        out.push('\n');
        for (metric, pick) in METRICS {
            let _ = write!(out, "{metric:<11}");
            for s in &self.at_k {
                let _ = write!(out, " {:.4}", pick(s));
                out.push_str("  ");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "n_cases     {}", self.n_cases);
        out
    }
}

type Pick = fn(&ScoresAtK) -> f64;

const METRICS: [(&str, Pick); 3] = [
    ("precision", |s| s.precision),
    ("recall", |s| s.recall),
    ("f1", |s| s.f1),
];

/// Builds evaluation cases for `posts`. Tags outside the vocabulary are
/// dropped and posts left without tags are skipped.
pub fn cases_from_scores(posts: &[Post], scores: &[Vec<f32>], vocab: &TagVocabulary) -> Result<Vec<EvalCase>> {
    let depth = MAX_K.min(vocab.len());
    let mut cases = Vec::with_capacity(posts.len());
    for (post, s) in posts.iter().zip(scores) {
        let Some(post) = filter_post(post, vocab) else {
            continue;
        };
        let gt = post.tags.iter().filter_map(|t| vocab.index_of(t));
        cases.push(EvalCase::new(gt, top_k_indices(s, depth)?)?);
    }
    Ok(cases)
}

/// Scores `test` with `model` and averages the metrics.
pub fn evaluate_corpus(
    model: &TagModel,
    vocab: &TagVocabulary,
    test: &[Post],
    batch_size: usize,
    model_digest: Option<String>,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = model.predict_many(test, batch_size)?;
    let cases = cases_from_scores(test, &scores, vocab)?;
    MetricsReport::from_cases(&cases, model_digest)
}

/// Reports for several variants and their differences from a baseline.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub baseline: String,
    pub variants: Vec<(String, MetricsReport)>,
}

impl AblationReport {
    pub fn new(baseline: &str, variants: Vec<(String, MetricsReport)>) -> Result<Self> {
        if !variants.iter().any(|(n, _)| n == baseline) {
            return Err(Error::InvalidConfig(format!("baseline variant {baseline} missing")));
        }
        Ok(Self {
            baseline: baseline.to_string(),
            variants,
        })
    }

    fn base(&self) -> &MetricsReport {
        &self
            .variants
            .iter()
            .find(|(n, _)| *n == self.baseline)
            .expect("checked in new")
            .1
    }

    /// `variant - baseline` for every metric and k.
    pub fn delta(&self, variant: &str) -> Option<[ScoresAtK; MAX_K]> {
        let base = self.base();
        let (_, r) = self.variants.iter().find(|(n, _)| n == variant)?;
        let mut out = [ScoresAtK::default(); MAX_K];
        for (i, d) in out.iter_mut().enumerate() {
            d.precision = r.at_k[i].precision - base.at_k[i].precision;
            d.recall = r.at_k[i].recall - base.at_k[i].recall;
            d.f1 = r.at_k[i].f1 - base.at_k[i].f1;
        }
        Some(out)
    }

    pub fn to_json(&self) -> Value {
        let mut reports = Map::new();
        let mut deltas = Map::new();
        for (name, report) in &self.variants {
            reports.insert(name.clone(), report.to_json());
            if *name != self.baseline {
                let d = self.delta(name).expect("variant present");
                let mut m = Map::new();
                for (metric, pick) in METRICS {
                    for (i, s) in d.iter().enumerate() {
                        m.insert(format!("{metric}@{}", i + 1), Value::from(pick(s)));
                    }
                }
                deltas.insert(name.clone(), Value::Object(m));
            }
        }
        serde_json::json!({
            "baseline": self.baseline,
            "reports": reports,
            "deltas": deltas,
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant     P@1     R@5     F1@5    dF1@5");
        for (name, r) in &self.variants {
            let d = self.delta(name).map(|d| d[MAX_K - 1].f1).unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{name:<10} {:.4}  {:.4}  {:.4}  {:+.4}",
                r.get(1).precision,
                r.get(MAX_K).recall,
                r.get(MAX_K).f1,
                d
            );
        }
        out
    }
}
