//! Versioned prompt templates.

use serde::{Deserialize, Serialize};

use super::LlmError;

pub const SELECTION_TEMPLATE_VERSION: &str = "selection-v1/newline-list";
pub const SUMMARIZE_TEMPLATE_VERSION: &str = "summarize-v1/newline-list";
pub const CONDENSE_TEMPLATE_VERSION: &str = "condense-v1/json-string";

const SELECTION_TEMPLATE: &str = include_str!("../../resources/selection_v1.txt");
const SUMMARIZE_TEMPLATE: &str = include_str!("../../resources/summarize_v1.txt");
const CONDENSE_TEMPLATE: &str = include_str!("../../resources/condense_v1.txt");

/// Header line every selection prompt starts with; used by mocks to recognize the task.
pub const SELECTION_PREFIX: &str = "Select and summary sentences";
pub const SUMMARIZE_PREFIX: &str = "Summarize the sentences";
pub const CONDENSE_PREFIX: &str = "Make up a more detailed scene description";
pub const LIST_HEADER: &str = "The given sentences set are:";
pub const CONDENSE_HEADER: &str = "The input caption is:";

/// Numbers substituted into the selection and summary templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionBounds {
    pub min_select: usize,
    pub max_select: usize,
    pub max_summary_words: usize,
}

impl Default for SelectionBounds {
    fn default() -> Self {
        SelectionBounds {
            min_select: 3,
            max_select: 8,
            max_summary_words: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPrompt {
    pub template_version: &'static str,
    pub rendered: String,
    pub group_ref: u64,
    pub candidate_count: usize,
}

fn fill(template: &str, bounds: &SelectionBounds) -> String {
    template
        .trim_end_matches('\n')
        .replace("{min_select}", &bounds.min_select.to_string())
        .replace("{max_select}", &bounds.max_select.to_string())
        .replace("{max_words}", &bounds.max_summary_words.to_string())
}

/// Escapes line breaks so every candidate stays on its own numbered line.
fn one_line(text: &str) -> String {
    if !text.contains(['\\', '\n', '\r']) {
        return text.to_string();
    }
    text.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

fn numbered_list<S: AsRef<str>>(header: String, captions: &[S]) -> String {
    let mut out = header;
    for (i, c) in captions.iter().enumerate() {
        out.push('\n');
        out.push_str(&format!("{}. {}", i + 1, one_line(c.as_ref())));
    }
    out
}

/// Renders the select-and-summarize prompt followed by a `1. <text>` list.
pub fn build_selection_prompt<S: AsRef<str>>(
    group_ref: u64,
    captions: &[S],
    bounds: &SelectionBounds,
) -> Result<SelectionPrompt, LlmError> {
    if captions.is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    Ok(SelectionPrompt {
        template_version: SELECTION_TEMPLATE_VERSION,
        rendered: numbered_list(fill(SELECTION_TEMPLATE, bounds), captions),
        group_ref,
        candidate_count: captions.len(),
    })
}

/// Summarize-only prompt: every candidate is merged, nothing is selected.
pub fn build_summarize_prompt<S: AsRef<str>>(
    captions: &[S],
    bounds: &SelectionBounds,
) -> Result<String, LlmError> {
    if captions.is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    Ok(numbered_list(fill(SUMMARIZE_TEMPLATE, bounds), captions))
}

/// Asks for a detailed scene description of one caption. The caption is
/// embedded as a JSON string literal so quotes survive intact.
pub fn build_condense_prompt(caption: &str, bounds: &SelectionBounds) -> Result<String, LlmError> {
    if caption.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    let literal = serde_json::to_string(caption).expect("string serializes");
    Ok(format!("{} {}", fill(CONDENSE_TEMPLATE, bounds), literal))
}

/// Recovers the candidate texts from a rendered list prompt.
pub fn candidates_of(prompt: &str) -> Vec<String> {
    let Some(pos) = prompt.find(LIST_HEADER) else {
        return Vec::new();
    };
    prompt[pos + LIST_HEADER.len()..]
        .lines()
        .filter_map(|l| {
            let (num, text) = l.split_once(". ")?;
            num.parse::<usize>().ok()?;
            Some(text.to_string())
        })
        .collect()
}

/// Recovers the caption from a condense prompt.
pub fn caption_of_condense(prompt: &str) -> Option<String> {
    let pos = prompt.find(CONDENSE_HEADER)?;
    serde_json::from_str(prompt[pos + CONDENSE_HEADER.len()..].trim()).ok()
}
