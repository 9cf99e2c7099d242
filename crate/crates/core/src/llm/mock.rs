//! Providers that never touch the network: a fixture replayer and a
//! heuristic offline responder.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Deserialize;

use super::client::{ChatCall, ChatProvider, ProviderError};
use super::prompt::{
    candidates_of, caption_of_condense, CONDENSE_PREFIX, SELECTION_PREFIX, SUMMARIZE_PREFIX,
};
use super::LlmError;
use crate::corpus::tokenize;

#[derive(Debug, Deserialize)]
struct FixtureLine {
    #[serde(default)]
    prompt_hash: Option<String>,
    #[serde(default)]
    match_index: Option<usize>,
    response: String,
}

/// Replays responses from a jsonl fixture file.
///
/// Entries keyed by `prompt_hash` take precedence; otherwise an entry whose
/// `match_index` equals the request's sequence number is used. Several
/// entries under one key answer successive re-asks in file order, the last
/// one repeating.
#[derive(Debug, Default, Clone)]
pub struct FixtureProvider {
    by_hash: HashMap<String, Vec<String>>,
    by_index: HashMap<usize, Vec<String>>,
}

impl FixtureProvider {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Fixture {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| LlmError::Fixture {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = FixtureProvider::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match (entry.prompt_hash, entry.match_index) {
                (Some(h), _) => out.by_hash.entry(h).or_default().push(entry.response),
                (None, Some(ix)) => out.by_index.entry(ix).or_default().push(entry.response),
                (None, None) => return Err(format!("line {}: needs prompt_hash or match_index", i + 1)),
            }
        }
        Ok(out)
    }

    pub fn push_hash(&mut self, prompt_hash: impl Into<String>, response: impl Into<String>) {
        self.by_hash
            .entry(prompt_hash.into())
            .or_default()
            .push(response.into());
    }

    pub fn push_index(&mut self, index: usize, response: impl Into<String>) {
        self.by_index.entry(index).or_default().push(response.into());
    }
}

fn nth_or_last(list: &[String], ask: u32) -> String {
    list[(ask as usize).min(list.len() - 1)].clone()
}

impl ChatProvider for FixtureProvider {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        if let Some(list) = self.by_hash.get(call.prompt_hash) {
            return Ok(nth_or_last(list, call.ask));
        }
        if let Some(list) = self.by_index.get(&call.sequence) {
            return Ok(nth_or_last(list, call.ask));
        }
        Err(ProviderError::status(
            404,
            format!(
                "no fixture for prompt {} (sequence {})",
                call.prompt_hash, call.sequence
            ),
        ))
    }
}

/// Deterministic stand-in for a chat model.
///
/// Selection prompts get the candidates that share the most words with the
/// first (query) candidate; summary prompts get a truncated query caption;
/// GenT prompts get simple sentences built from the listed objects.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineProvider;

/// Reads the integer that follows `before` in `text`.
fn number_after(text: &str, before: &str) -> Option<usize> {
    let rest = &text[text.find(before)? + before.len()..];
    let digits: String = rest
        .trim_start()
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

fn truncate_words(text: &str, max: usize) -> String {
    text.split_whitespace()
        .take(max.max(1))
        .collect::<Vec<_>>()
        .join(" ")
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn offline_selection(prompt: &str) -> String {
    let cands = candidates_of(prompt);
    let min = number_after(prompt, "You should find").unwrap_or(3);
    let max = number_after(prompt, &format!("find {min} to")).unwrap_or(8);
    let max_words = number_after(prompt, "one not exceed").unwrap_or(50);
    if cands.is_empty() {
        return r#"{"index": [], "summary": ""}"#.into();
    }
    let sets: Vec<BTreeSet<String>> = cands.iter().map(|c| tokenize(c).into_iter().collect()).collect();
    let mut ranked: Vec<(usize, f64)> = (1..cands.len())
        .map(|i| (i, overlap(&sets[0], &sets[i])))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen = vec![0usize];
    for (i, s) in ranked {
        if chosen.len() >= max {
            break;
        }
        if s >= 0.3 || chosen.len() < min {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    let index: Vec<usize> = chosen.iter().map(|i| i + 1).collect();
    let summary = truncate_words(&cands[0], max_words);
    serde_json::json!({ "index": index, "summary": summary }).to_string()
}

fn offline_gent(prompt: &str) -> String {
    let first = prompt.lines().next().unwrap_or("");
    let objects: Vec<&str> = match (first.find('['), first.rfind(']')) {
        (Some(a), Some(b)) if a < b => first[a + 1..b]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect(),
        _ => Vec::new(),
    };
    let n = objects.len();
    if n == 0 {
        return String::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let a = objects[i];
        let b = objects[(i * 7 + 3) % n];
        let c = objects[(i * 13 + 5) % n];
        out.push(format!("A {a} rests beside a {b} near the {c} in a bright room"));
    }
    out.join(";")
}

impl ChatProvider for OfflineProvider {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        let prompt = call.request.prompt();
        if prompt.starts_with(SELECTION_PREFIX) {
            Ok(offline_selection(prompt))
        } else if prompt.starts_with(SUMMARIZE_PREFIX) {
            let max_words = number_after(prompt, "one not exceed").unwrap_or(50);
            let first = candidates_of(prompt).into_iter().next().unwrap_or_default();
            Ok(serde_json::json!({ "summary": truncate_words(&first, max_words) }).to_string())
        } else if prompt.starts_with(CONDENSE_PREFIX) {
            let max_words = number_after(prompt, "does not exceed").unwrap_or(50);
            let caption = caption_of_condense(prompt).unwrap_or_default();
            let text = truncate_words(&format!("{caption} in a detailed everyday scene"), max_words);
            Ok(serde_json::json!({ "summary": text }).to_string())
        } else if prompt.starts_with("Given ") {
            Ok(offline_gent(prompt))
        } else {
            Err(ProviderError::status(
                400,
                "offline provider does not recognize this prompt",
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{
        build_condense_prompt, build_selection_prompt, parse_selection_response, parse_summary_response,
        validate_selection, ChatRequest, LlmClient, LlmPolicy, SelectionBounds,
    };

    fn call<'a>(req: &'a ChatRequest, hash: &'a str, sequence: usize, ask: u32) -> ChatCall<'a> {
        ChatCall {
            request: req,
            prompt_hash: hash,
            sequence,
            ask,
        }
    }

    #[test]
    fn fixture_lookup_order() {
        let f = FixtureProvider::parse(
            "{\"prompt_hash\":\"h1\",\"response\":\"first\"}\n\
             {\"prompt_hash\":\"h1\",\"response\":\"second\"}\n\
             {\"match_index\":4,\"response\":\"by index\"}\n",
        )
        .unwrap();
        let req = ChatRequest::user("m", "p", 0.7);
        assert_eq!(f.complete(&call(&req, "h1", 4, 0)).unwrap(), "first");
        assert_eq!(f.complete(&call(&req, "h1", 4, 1)).unwrap(), "second");
        assert_eq!(f.complete(&call(&req, "h1", 4, 5)).unwrap(), "second");
        assert_eq!(f.complete(&call(&req, "zz", 4, 0)).unwrap(), "by index");
        let err = f.complete(&call(&req, "zz", 5, 0)).unwrap_err();
        assert_eq!(err.status, Some(404));
        assert!(FixtureProvider::parse("{\"response\":\"x\"}").is_err());
    }

    #[test]
    fn cached_prompt_makes_no_provider_call() {
        let mut f = FixtureProvider::default();
        f.push_hash(LlmClient::prompt_hash("hello"), "world");
        let c = LlmClient::new(Box::new(f), LlmPolicy::default(), "m", 0.7).unwrap();
        let first = c.request_with_retry("hello", 0, 0).unwrap();
        assert!(!first.from_cache);
        let again = c.request_with_retry("hello", 0, 0).unwrap();
        assert!(again.from_cache);
        assert_eq!(again.attempts, 0);
        assert_eq!(again.raw, "world");
    }

    #[test]
    fn offline_selection_is_valid() {
        let bounds = SelectionBounds::default();
        let caps = [
            "a dog runs in the park",
            "a dog plays in the park",
            "a red car on the road",
            "the dog runs across a park",
            "a park with a dog running",
            "a plate of food",
        ];
        let p = build_selection_prompt(9, &caps, &bounds).unwrap();
        let req = ChatRequest::user("m", &p.rendered, 0.7);
        let raw = OfflineProvider.complete(&call(&req, "h", 0, 0)).unwrap();
        let parsed = parse_selection_response(9, &raw).unwrap();
        let v = validate_selection(&parsed, p.candidate_count, &bounds).unwrap();
        assert_eq!(v.selected_indices[0], 1);
        assert!(!v.selected_indices.contains(&6));
    }

    #[test]
    fn offline_condense_keeps_caption() {
        let p = build_condense_prompt("a \"quoted\" dog", &SelectionBounds::default()).unwrap();
        let req = ChatRequest::user("m", &p, 0.7);
        let raw = OfflineProvider.complete(&call(&req, "h", 0, 0)).unwrap();
        assert!(parse_summary_response(&raw)
            .unwrap()
            .starts_with("a \"quoted\" dog"));
    }

    #[test]
    fn offline_gent_uses_objects() {
        let req = ChatRequest::user("m", "Given 2 objects [ cat, sofa]\nrest", 0.7);
        let raw = OfflineProvider.complete(&call(&req, "h", 0, 0)).unwrap();
        let lines: Vec<&str> = raw.split(';').collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("cat") && lines[0].contains("sofa"));
    }
}
