//! Question ingestion: dump parsing, body decomposition and the JSONL
//! dataset format shared by every later stage.

mod dump;
mod html;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use dump::{
    build_dataset, format_tags, parse_dump_row, parse_tags, partial_marker, post_from_raw, CorpusSummary, RawPost,
};
pub use html::{
    clean_code, collapse_whitespace, decode_entities, decompose_body, has_code_block, split_body, strip_html,
};

use crate::error::{Error, Result};

/// A question carries at most this many tags.
pub const MAX_TAGS: usize = 5;

/// A preprocessed question. Serialized field order is fixed, one JSON
/// object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: u64,
    #[serde(serialize_with = "write_timestamp", deserialize_with = "read_timestamp")]
    pub created_at: DateTime<Utc>,
    pub title: String,
    pub description: String,
    pub code: String,
    pub tags: Vec<String>,
}

fn write_timestamp<S: Serializer>(ts: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Millis, true))
}

fn read_timestamp<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DateTime<Utc>, D::Error> {
    let s = String::deserialize(d)?;
    DateTime::parse_from_rfc3339(&s)
        .map(|dt| dt.with_timezone(&Utc))
        .map_err(serde::de::Error::custom)
}

impl Post {
    /// A post built from request text rather than the dump: no tags, epoch
    /// timestamp.
    pub fn unlabeled(title: String, description: String, code: String) -> Self {
        Self {
            id: 0,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            title,
            description,
            code,
            tags: Vec::new(),
        }
    }

    /// Checks the structural invariants every stored post must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::InvalidPost {
                id: self.id,
                message: message.to_string(),
            })
        };
        if self.title.trim().is_empty() {
            return fail("empty title");
        }
        if self.tags.is_empty() || self.tags.len() > MAX_TAGS {
            return fail("tag count outside 1..=5");
        }
        for (i, tag) in self.tags.iter().enumerate() {
            if tag.is_empty() || tag.contains(['<', '>']) {
                return fail("tag contains angle brackets or is empty");
            }
            if self.tags[..i].contains(tag) {
                return fail("duplicate tag");
            }
        }
        if self.description != collapse_whitespace(&self.description) {
            return fail("description whitespace is not normalized");
        }
        Ok(())
    }
}

/// Reads a JSONL dataset, validating every record.
pub fn read_dataset(path: &Path) -> Result<Vec<Post>> {
    let reader = BufReader::new(File::open(path)?);
    let mut posts = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(&line)?;
        post.validate()?;
        posts.push(post);
    }
    Ok(posts)
}

pub fn write_dataset<'a>(path: &Path, posts: impl IntoIterator<Item = &'a Post>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for post in posts {
        serde_json::to_writer(&mut writer, post)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Sorts by creation time (id breaks ties) and holds out the `test_size`
/// latest posts. Returns `(train, test)`.
pub fn chronological_split(mut posts: Vec<Post>, test_size: usize) -> (Vec<Post>, Vec<Post>) {
    posts.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
    let cut = posts.len().saturating_sub(test_size);
    let test = posts.split_off(cut);
    (posts, test)
}
