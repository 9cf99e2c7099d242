//! LLM orchestration: prompt rendering, a rate-limited retrying client, and
//! strict parsing of selection replies.
//!
//! The model is only ever asked for candidate *indices*; validated results
//! therefore cannot reference a caption that is not in the group.

mod client;
pub mod mock;
mod parse;
mod prompt;

use thiserror::Error;

pub use client::{
    AuditRecord, ChatCall, ChatMessage, ChatProvider, ChatRequest, HttpChatProvider, LlmClient, LlmPolicy,
    LlmResponse, ProviderError, ProviderErrorKind,
};
pub use parse::{
    extract_json_object, normalize_quotes, parse_selection_response, parse_summary_response,
    validate_selection, validate_summary, Rejection, SelectionResult, ValidatedSelection,
};
pub use prompt::{
    build_condense_prompt, build_selection_prompt, build_summarize_prompt, candidates_of,
    caption_of_condense, SelectionBounds, SelectionPrompt, CONDENSE_PREFIX, CONDENSE_TEMPLATE_VERSION,
    SELECTION_PREFIX, SELECTION_TEMPLATE_VERSION, SUMMARIZE_PREFIX, SUMMARIZE_TEMPLATE_VERSION,
};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("cannot build a prompt from an empty input")]
    EmptyPrompt,
    #[error("no JSON object in response {response_hash}")]
    NoJsonObject { response_hash: String },
    #[error("response {response_hash} lacks key {key:?}")]
    MissingKey {
        key: &'static str,
        response_hash: String,
    },
    #[error("response {response_hash} has ill-typed {key:?}")]
    IllTyped {
        key: &'static str,
        response_hash: String,
    },
    #[error("provider error (status {status:?}) after {attempts} attempt(s): {message}")]
    Provider {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    #[error("retries exhausted after {attempts} attempts (last status {status:?}): {message}")]
    RetriesExhausted {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("invalid LLM policy: {0}")]
    Policy(String),
    #[error("audit log {path}: {source}")]
    Audit {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture file {path}: {message}")]
    Fixture {
        path: std::path::PathBuf,
        message: String,
    },
}

impl LlmError {
    /// Whether the failure came from the provider side rather than the reply content.
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            LlmError::Provider { .. } | LlmError::RetriesExhausted { .. } | LlmError::Timeout { .. }
        )
    }
}

/// Outcome of asking for one group's selection, including re-asks.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionOutcome {
    Accepted {
        selection: ValidatedSelection,
        asks: u32,
    },
    /// Every ask produced an invalid reply; the group is dropped.
    Rejected {
        reasons: Vec<Rejection>,
        asks: u32,
        last_response_hash: Option<String>,
    },
}

/// Sends the selection prompt, validating each reply and re-asking up to
/// `reask_budget` more times on rejection.
pub fn select_and_summarize(
    client: &LlmClient,
    prompt: &SelectionPrompt,
    sequence: usize,
    bounds: &SelectionBounds,
    reask_budget: u32,
) -> Result<SelectionOutcome, LlmError> {
    let mut last_reasons = Vec::new();
    let mut last_hash = None;
    for ask in 0..=reask_budget {
        let resp = client.request_with_retry(&prompt.rendered, sequence, ask)?;
        last_hash = Some(crate::hashing::sha256_hex(resp.raw.as_bytes()));
        match parse_selection_response(prompt.group_ref, &resp.raw) {
            Ok(parsed) => match validate_selection(&parsed, prompt.candidate_count, bounds) {
                Ok(selection) => {
                    return Ok(SelectionOutcome::Accepted {
                        selection,
                        asks: ask + 1,
                    })
                }
                Err(reasons) => last_reasons = reasons,
            },
            Err(e) => {
                last_reasons = vec![Rejection::Unparseable {
                    detail: e.to_string(),
                }]
            }
        }
    }
    Ok(SelectionOutcome::Rejected {
        reasons: last_reasons,
        asks: reask_budget + 1,
        last_response_hash: last_hash,
    })
}

/// Outcome of a summary-style request, including re-asks.
#[derive(Debug, Clone, PartialEq)]
pub enum SummaryOutcome {
    Accepted {
        summary: String,
        response_hash: String,
        asks: u32,
    },
    Rejected {
        reasons: Vec<Rejection>,
        asks: u32,
    },
}

/// Sends a summary-style prompt (summarize-only or condense) with the same
/// re-ask policy as selection.
pub fn request_summary(
    client: &LlmClient,
    prompt: &str,
    sequence: usize,
    max_words: usize,
    reask_budget: u32,
) -> Result<SummaryOutcome, LlmError> {
    let mut last = Vec::new();
    for ask in 0..=reask_budget {
        let resp = client.request_with_retry(prompt, sequence, ask)?;
        let hash = crate::hashing::sha256_hex(resp.raw.as_bytes());
        match parse_summary_response(&resp.raw) {
            Ok(summary) => {
                let reasons = validate_summary(&summary, max_words);
                if reasons.is_empty() {
                    return Ok(SummaryOutcome::Accepted {
                        summary,
                        response_hash: hash,
                        asks: ask + 1,
                    });
                }
                last = reasons;
            }
            Err(e) => {
                last = vec![Rejection::Unparseable {
                    detail: e.to_string(),
                }]
            }
        }
    }
    Ok(SummaryOutcome::Rejected {
        reasons: last,
        asks: reask_budget + 1,
    })
}
