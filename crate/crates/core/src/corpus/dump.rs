//! Streaming ingestion of the `Posts.xml` dump.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use quick_xml::events::Event;
use quick_xml::{Reader, XmlVersion};
use serde::Serialize;

use super::html::{collapse_whitespace, decompose_body};
use super::{Post, MAX_TAGS};
use crate::error::{Error, Result};

/// One question row as found in the dump, attributes already XML-unescaped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPost {
    pub id: u64,
    pub post_type: u8,
    pub creation_date: DateTime<Utc>,
    pub title: String,
    pub body_html: String,
    pub tag_field: String,
}

fn malformed(offset: u64, message: impl Into<String>) -> Error {
    Error::MalformedRow {
        offset,
        message: message.into(),
    }
}

/// Parses one `<row …/>` element.
///
/// Returns `Ok(None)` for anything that is not a tagged question with a
/// title and body: answers, wiki posts and tagless questions are skipped.
/// `offset` is only used to locate errors.
pub fn parse_dump_row(xml_row: &str, offset: u64) -> Result<Option<RawPost>> {
    let mut reader = Reader::from_str(xml_row.trim());
    let element = loop {
        match reader.read_event() {
            Ok(Event::Empty(e)) | Ok(Event::Start(e)) => break e,
            Ok(Event::Eof) => return Err(malformed(offset, "no element found")),
            Ok(Event::Decl(_)) | Ok(Event::Comment(_)) | Ok(Event::Text(_)) => continue,
            Ok(other) => return Err(malformed(offset, format!("unexpected event {other:?}"))),
            Err(e) => return Err(malformed(offset, e.to_string())),
        }
    };
    if element.name().as_ref() != "row" {
        return Err(malformed(
            offset,
            format!("expected <row>, found <{}>", element.name().as_ref()),
        ));
    }

    let mut id = None;
    let mut post_type = None;
    let mut creation = None;
    let mut title = None;
    let mut body = None;
    let mut tags = None;
    for attr in element.attributes() {
        let attr = attr.map_err(|e| malformed(offset, e.to_string()))?;
        let slot = match attr.key.as_ref() {
            "Id" => &mut id,
            "PostTypeId" => &mut post_type,
            "CreationDate" => &mut creation,
            "Title" => &mut title,
            "Body" => &mut body,
            "Tags" => &mut tags,
            _ => continue,
        };
        let value = attr
            .normalized_value(XmlVersion::Implicit1_0)
            .map_err(|e| malformed(offset, e.to_string()))?;
        *slot = Some(value.into_owned());
    }

    let post_type: u8 = match post_type {
        Some(v) => v
            .parse()
            .map_err(|_| malformed(offset, format!("bad PostTypeId {v:?}")))?,
        None => return Err(malformed(offset, "missing PostTypeId")),
    };
    if post_type != 1 {
        return Ok(None);
    }
    let (Some(title), Some(body_html), Some(tag_field)) = (title, body, tags) else {
        return Ok(None);
    };
    if title.is_empty() || body_html.is_empty() || tag_field.is_empty() {
        return Ok(None);
    }
    let id = id
        .ok_or_else(|| malformed(offset, "missing Id"))?
        .parse()
        .map_err(|_| malformed(offset, "bad Id"))?;
    let creation_date = parse_dump_date(&creation.ok_or_else(|| malformed(offset, "missing CreationDate"))?)
        .ok_or_else(|| malformed(offset, "bad CreationDate"))?;

    Ok(Some(RawPost {
        id,
        post_type,
        creation_date,
        title,
        body_html,
        tag_field,
    }))
}

/// Dump timestamps look like `2008-07-31T21:42:52.667` and are UTC.
fn parse_dump_date(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .ok()
        .map(|n| n.and_utc())
}

/// Unwraps `<a><b>` into `["a", "b"]`, dropping repeats.
pub fn parse_tags(tag_field: &str) -> Result<Vec<String>> {
    let bad = |message: &str| Error::MalformedTags {
        field: tag_field.to_string(),
        message: message.to_string(),
    };
    let mut tags: Vec<String> = Vec::new();
    let mut rest = tag_field;
    while !rest.is_empty() {
        let inner = rest.strip_prefix('<').ok_or_else(|| bad("expected '<'"))?;
        let close = inner.find('>').ok_or_else(|| bad("unterminated tag"))?;
        let name = &inner[..close];
        if name.is_empty() || name.contains('<') {
            return Err(bad("empty or nested tag"));
        }
        if !tags.iter().any(|t| t == name) {
            tags.push(name.to_string());
        }
        rest = &inner[close + 1..];
    }
    Ok(tags)
}

pub fn format_tags(tags: &[String]) -> String {
    tags.iter().map(|t| format!("<{t}>")).collect()
}

/// Turns a raw question into a [`Post`], or `None` when it is dump noise
/// (blank title, no tags, more than five tags).
pub fn post_from_raw(raw: &RawPost) -> Result<Option<Post>> {
    let title = collapse_whitespace(&raw.title);
    if title.is_empty() {
        return Ok(None);
    }
    let tags = parse_tags(&raw.tag_field)?;
    if tags.is_empty() || tags.len() > MAX_TAGS {
        return Ok(None);
    }
    let (description, code) = decompose_body(&raw.body_html);
    Ok(Some(Post {
        id: raw.id,
        created_at: raw.creation_date,
        title,
        description,
        code,
        tags,
    }))
}

/// Row accounting for one ingestion run.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub rows: u64,
    pub kept: u64,
    pub skipped: u64,
    /// Subset of `skipped`: rows that failed to parse.
    pub malformed: u64,
}

/// Path of the marker written next to an output while it is incomplete.
pub fn partial_marker(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Streams dump lines into a JSONL dataset at `output`.
///
/// Lines that are not `<row` elements (XML declaration, the `<posts>`
/// wrapper) are ignored and not counted. The output is written to a
/// `.partial` file and renamed into place on success, so an interrupted run
/// leaves the marker behind and never a truncated dataset under the final
/// name.
pub fn build_dataset<R: BufRead>(dump: R, output: &Path, limit: Option<u64>) -> Result<CorpusSummary> {
    let partial = partial_marker(output);
    let mut writer = BufWriter::new(File::create(&partial)?);
    let mut summary = CorpusSummary::default();

    for (line_no, line) in dump.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_start();
        if !trimmed.starts_with("<row") {
            continue;
        }
        if limit.is_some_and(|n| summary.kept >= n) {
            break;
        }
        summary.rows += 1;
        let post = match parse_dump_row(trimmed, line_no as u64) {
            Ok(Some(raw)) => post_from_raw(&raw),
            Ok(None) => Ok(None),
            Err(e) => Err(e),
        };
        match post {
            Ok(Some(post)) => {
                serde_json::to_writer(&mut writer, &post)?;
                writer.write_all(b"\n")?;
                summary.kept += 1;
            }
            Ok(None) => summary.skipped += 1,
            Err(e) => {
                tracing::debug!("skipping row: {e}");
                summary.skipped += 1;
                summary.malformed += 1;
            }
        }
    }

    writer.flush()?;
    drop(writer);
    fs::rename(&partial, output)?;
    Ok(summary)
}
