//! Response parsing and validation for selection and summary replies.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::prompt::SelectionBounds;
use super::LlmError;
use crate::corpus::tokenize;
use crate::hashing::sha256_hex;

/// A parsed, not yet validated, selection reply. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub group_ref: u64,
    pub selected_indices: Vec<i64>,
    pub summary: String,
    pub raw_response_hash: String,
}

/// Why a selection was refused. Serialized as `{"reason": ..., ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    IndexOutOfRange { index: i64 },
    DuplicateIndex { index: i64 },
    TooFewSelected { count: usize, min: usize },
    TooManySelected { count: usize, max: usize },
    EmptySummary,
    SummaryTooLong { words: usize, max: usize },
    Unparseable { detail: String },
}

impl Rejection {
    /// Stable short code used for histograms.
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::IndexOutOfRange { .. } => "index_out_of_range",
            Rejection::DuplicateIndex { .. } => "duplicate_index",
            Rejection::TooFewSelected { .. } => "too_few_selected",
            Rejection::TooManySelected { .. } => "too_many_selected",
            Rejection::EmptySummary => "empty_summary",
            Rejection::SummaryTooLong { .. } => "summary_too_long",
            Rejection::Unparseable { .. } => "unparseable",
        }
    }
}

/// A selection that passed validation: every index names a real candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedSelection {
    pub group_ref: u64,
    /// 1-based candidate positions, in the order the model gave them.
    pub selected_indices: Vec<usize>,
    pub summary: String,
    pub raw_response_hash: String,
}

/// Maps typographic quotes and backticks to ASCII quote characters.
pub fn normalize_quotes(raw: &str) -> String {
    raw.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' | '`' | '\u{00B4}' => '\'',
            other => other,
        })
        .collect()
}

/// Finds balanced `{...}` spans in order of their opening brace, honouring
/// double- and single-quoted strings.
fn object_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let mut depth = 0usize;
        let mut quote: Option<u8> = None;
        let mut escaped = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == q {
                    quote = None;
                }
                continue;
            }
            match b {
                b'"' => quote = Some(b'"'),
                b'\'' if single_quote_opens(bytes, start + off) => quote = Some(b'\''),
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, start + off + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

/// A single quote opens a string only where a JSON value or key may start.
fn single_quote_opens(bytes: &[u8], pos: usize) -> bool {
    bytes[..pos]
        .iter()
        .rev()
        .find(|b| !b.is_ascii_whitespace())
        .is_some_and(|b| matches!(b, b'{' | b'[' | b':' | b','))
}

/// Rewrites single-quoted strings as JSON double-quoted strings.
fn requote_single(obj: &str) -> String {
    let bytes = obj.as_bytes();
    let mut out = String::with_capacity(obj.len());
    let mut i = 0;
    let mut in_double = false;
    while i < bytes.len() {
        let c = obj[i..].chars().next().unwrap();
        let w = c.len_utf8();
        if in_double {
            out.push(c);
            if c == '\\' && i + 1 < bytes.len() {
                let n = obj[i + 1..].chars().next().unwrap();
                out.push(n);
                i += 1 + n.len_utf8();
                continue;
            }
            if c == '"' {
                in_double = false;
            }
            i += w;
            continue;
        }
        if c == '"' {
            in_double = true;
            out.push(c);
            i += w;
            continue;
        }
        if c == '\'' && single_quote_opens(bytes, i) {
            // scan to the closing quote: one followed by a structural character
            let mut j = i + 1;
            let mut body = String::new();
            let mut closed = false;
            while j < bytes.len() {
                let d = obj[j..].chars().next().unwrap();
                if d == '\'' {
                    let next = bytes[j + 1..].iter().find(|b| !b.is_ascii_whitespace());
                    if matches!(next, None | Some(b':' | b',' | b'}' | b']')) {
                        closed = true;
                        break;
                    }
                }
                body.push(d);
                j += d.len_utf8();
            }
            if closed {
                out.push_str(&serde_json::to_string(&body).expect("string serializes"));
                i = j + 1;
                continue;
            }
        }
        out.push(c);
        i += w;
    }
    out
}

/// Extracts the first JSON object from a chatty reply.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let text = normalize_quotes(raw);
    for (a, b) in object_spans(&text) {
        let span = &text[a..b];
        let parsed = serde_json::from_str::<Value>(span)
            .ok()
            .or_else(|| serde_json::from_str::<Value>(&requote_single(span)).ok());
        if let Some(Value::Object(map)) = parsed {
            return Some(map);
        }
    }
    None
}

fn summary_field(map: &serde_json::Map<String, Value>, hash: &str) -> Result<String, LlmError> {
    match map.get("summary") {
        None => Err(LlmError::MissingKey {
            key: "summary",
            response_hash: hash.to_string(),
        }),
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(_) => Err(LlmError::IllTyped {
            key: "summary",
            response_hash: hash.to_string(),
        }),
    }
}

/// Parses `{"index": [int], "summary": str}` out of a reply.
pub fn parse_selection_response(group_ref: u64, raw: &str) -> Result<SelectionResult, LlmError> {
    let hash = sha256_hex(raw.as_bytes());
    let map = extract_json_object(raw).ok_or_else(|| LlmError::NoJsonObject {
        response_hash: hash.clone(),
    })?;
    let ill = || LlmError::IllTyped {
        key: "index",
        response_hash: hash.clone(),
    };
    let indices = match map.get("index") {
        None => {
            return Err(LlmError::MissingKey {
                key: "index",
                response_hash: hash,
            })
        }
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_i64().ok_or_else(ill))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(ill()),
    };
    let summary = summary_field(&map, &hash)?;
    Ok(SelectionResult {
        group_ref,
        selected_indices: indices,
        summary,
        raw_response_hash: hash,
    })
}

/// Parses a `{"summary": str}` reply (summarize-only and condense prompts).
/// A reply without any JSON object is taken verbatim as the summary.
pub fn parse_summary_response(raw: &str) -> Result<String, LlmError> {
    let hash = sha256_hex(raw.as_bytes());
    match extract_json_object(raw) {
        Some(map) => summary_field(&map, &hash),
        None => {
            let text = raw.trim().trim_matches('"').trim();
            if text.is_empty() {
                Err(LlmError::NoJsonObject { response_hash: hash })
            } else {
                Ok(text.to_string())
            }
        }
    }
}

/// Checks the summary alone: non-empty and within the word budget.
pub fn validate_summary(summary: &str, max_words: usize) -> Vec<Rejection> {
    let words = tokenize(summary).len();
    if words == 0 {
        vec![Rejection::EmptySummary]
    } else if words > max_words {
        vec![Rejection::SummaryTooLong {
            words,
            max: max_words,
        }]
    } else {
        Vec::new()
    }
}

/// Accepts a selection iff indices are distinct and in `1..=candidate_count`,
/// their count is within bounds, and the summary is non-empty and short
/// enough. Every failed check is reported.
pub fn validate_selection(
    result: &SelectionResult,
    candidate_count: usize,
    bounds: &SelectionBounds,
) -> Result<ValidatedSelection, Vec<Rejection>> {
    let mut reasons = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &i in &result.selected_indices {
        if i < 1 || i as u64 > candidate_count as u64 {
            reasons.push(Rejection::IndexOutOfRange { index: i });
        } else if !seen.insert(i) {
            reasons.push(Rejection::DuplicateIndex { index: i });
        }
    }
    let count = result.selected_indices.len();
    if count < bounds.min_select {
        reasons.push(Rejection::TooFewSelected {
            count,
            min: bounds.min_select,
        });
    }
    if count > bounds.max_select {
        reasons.push(Rejection::TooManySelected {
            count,
            max: bounds.max_select,
        });
    }
    reasons.extend(validate_summary(&result.summary, bounds.max_summary_words));
    if !reasons.is_empty() {
        return Err(reasons);
    }
    Ok(ValidatedSelection {
        group_ref: result.group_ref,
        selected_indices: result.selected_indices.iter().map(|&i| i as usize).collect(),
        summary: result.summary.clone(),
        raw_response_hash: result.raw_response_hash.clone(),
    })
}
