//! Body decomposition: separating code blocks from prose and removing
//! formatting markup.

use std::sync::LazyLock;

use regex::Regex;

/// A `<pre><code>` block. Attributes on either element are tolerated because
/// later dumps emit `<pre class="lang-…">`.
static CODE_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<pre(?:\s[^>]*)?><code(?:\s[^>]*)?>([\s\S]*?)</code></pre>").unwrap());

static COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<!--[\s\S]*?-->").unwrap());

static ELEMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?([A-Za-z][A-Za-z0-9]*)(?:\s[^>]*)?/?>").unwrap());

/// Elements whose boundaries separate words. Everything else (`em`, `code`,
/// `a`, …) is removed without inserting whitespace.
const BLOCK_ELEMENTS: &[&str] = &[
    "address",
    "article",
    "aside",
    "blockquote",
    "br",
    "dd",
    "div",
    "dl",
    "dt",
    "figcaption",
    "figure",
    "footer",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "header",
    "hr",
    "img",
    "li",
    "ol",
    "p",
    "pre",
    "section",
    "table",
    "tbody",
    "td",
    "tfoot",
    "th",
    "thead",
    "tr",
    "ul",
];

/// Returns true when `body` holds at least one `<pre><code>` block.
pub fn has_code_block(body: &str) -> bool {
    CODE_BLOCK.is_match(body)
}

/// Splits a question body into `(description_html, code)`.
///
/// `code` is the raw content of every `<pre><code>` block joined with `\n`
/// in document order; the description keeps everything else verbatim,
/// including inline `<code>` spans.
pub fn split_body(body_html: &str) -> (String, String) {
    let blocks: Vec<&str> = CODE_BLOCK
        .captures_iter(body_html)
        .map(|c| c.get(1).map_or("", |m| m.as_str()))
        .collect();
    if blocks.is_empty() {
        return (body_html.to_string(), String::new());
    }
    let description = CODE_BLOCK.replace_all(body_html, "").into_owned();
    (description, blocks.join("\n"))
}

/// Splits a body and cleans both parts: `(description, code)` as stored in
/// a [`Post`](super::Post).
pub fn decompose_body(body_html: &str) -> (String, String) {
    let (description_html, code) = split_body(body_html);
    (strip_html(&description_html), clean_code(&code))
}

/// Removes element markup, decodes entities once, collapses whitespace and
/// trims. Unbalanced or stray tags are removed best-effort.
pub fn strip_html(fragment: &str) -> String {
    let without_comments = COMMENT.replace_all(fragment, " ");
    let text = ELEMENT.replace_all(&without_comments, |caps: &regex::Captures<'_>| {
        let name = caps[1].to_ascii_lowercase();
        if BLOCK_ELEMENTS.contains(&name.as_str()) {
            " "
        } else {
            ""
        }
    });
    collapse_whitespace(&decode_entities(&text))
}

/// Cleans captured code: markup removed, entities decoded once, trailing
/// whitespace and leading blank lines dropped. Indentation is preserved.
pub fn clean_code(raw: &str) -> String {
    let without_markup = ELEMENT.replace_all(raw, "");
    let decoded = decode_entities(&without_markup);
    decoded.trim_end().trim_start_matches(['\n', '\r']).to_string()
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Single-pass HTML entity decoding. Output is never re-scanned, so
/// `&amp;lt;` becomes `&lt;`, not `<`. Unknown entities stay literal.
pub fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        match decode_one(tail) {
            Some((ch, consumed)) => {
                out.push(ch);
                rest = &tail[consumed..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Decodes the entity at the start of `s` (which begins with `&`), returning
/// the character and the number of bytes consumed.
fn decode_one(s: &str) -> Option<(char, usize)> {
    let semi = s[..s.len().min(12)].find(';')?;
    let name = &s[1..semi];
    let ch = match name {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => '\u{a0}',
        _ => {
            let num = name.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                None => num.parse::<u32>().ok()?,
            };
            char::from_u32(code)?
        }
    };
    Some((ch, semi + 1))
}
