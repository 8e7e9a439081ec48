//! Explainable highlights: tagged excerpts from a tagging model, resolved to
//! character-offset spans in the original text.
//!
//! Offsets are `char` indices, not byte indices. Matching is case-insensitive
//! with whitespace runs collapsed; there is no stemming or fuzzy matching, so
//! an excerpt that cannot be found is reported rather than guessed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{ProviderId, Question, RecordId, RecordStatus};
use crate::prompt::{PromptCompiler, PromptError, TaggingMode};
use crate::store::{Repository, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSegment {
    pub text: String,
    pub label: String,
}

impl TaggedSegment {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Resolution {
    pub spans: Vec<HighlightSpan>,
    pub unresolved: Vec<TaggedSegment>,
}

/// Cached highlight result for one record in one mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightResult {
    pub record_id: RecordId,
    pub mode: TaggingMode,
    /// The text the spans index into: the student answer or the rationale.
    pub source_text: String,
    pub spans: Vec<HighlightSpan>,
    pub unresolved: Vec<TaggedSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HighlightError {
    #[error("tagging response could not be parsed: {0}")]
    TaggingParseFailed(String),
}

impl HighlightError {
    pub fn code(&self) -> &'static str {
        "tagging_parse_failed"
    }
}

/// Lowercased text with whitespace runs collapsed to one space, plus, for
/// every output char, the `[start, end)` char range it came from.
struct Normalized {
    chars: Vec<char>,
    origin: Vec<(usize, usize)>,
    /// True where the output char is the first char produced by its source
    /// char (lowercasing can expand one char into several).
    boundary: Vec<bool>,
}

fn normalize(text: &str) -> Normalized {
    let mut n = Normalized {
        chars: Vec::new(),
        origin: Vec::new(),
        boundary: Vec::new(),
    };
    let mut in_space = false;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if in_space {
                n.origin.last_mut().unwrap().1 = i + 1;
            } else {
                n.chars.push(' ');
                n.origin.push((i, i + 1));
                n.boundary.push(true);
                in_space = true;
            }
            continue;
        }
        in_space = false;
        for (k, lc) in c.to_lowercase().enumerate() {
            n.chars.push(lc);
            n.origin.push((i, i + 1));
            n.boundary.push(k == 0);
        }
    }
    n
}

/// Lowercase and collapse whitespace. Used to compare excerpts with spans.
pub fn normalize_for_match(text: &str) -> String {
    normalize(text).chars.into_iter().collect::<String>().trim().to_owned()
}

/// Greedy left-to-right resolution. Each segment matches at the earliest
/// position at or after the end of the previous match.
pub fn resolve_spans(source: &str, segments: &[TaggedSegment]) -> Resolution {
    let src = normalize(source);
    let mut out = Resolution::default();
    let mut cursor = 0; // index into src.chars
    for seg in segments {
        let needle: Vec<char> = normalize_for_match(&seg.text).chars().collect();
        match find_from(&src, &needle, cursor) {
            Some(at) => {
                let last = at + needle.len() - 1;
                out.spans.push(HighlightSpan {
                    start: src.origin[at].0,
                    end: src.origin[last].1,
                    label: seg.label.clone(),
                });
                cursor = at + needle.len();
            }
            None => out.unresolved.push(seg.clone()),
        }
    }
    out
}

fn find_from(src: &Normalized, needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > src.chars.len() {
        return None;
    }
    (from..=src.chars.len() - needle.len()).find(|&at| {
        let end = at + needle.len();
        src.chars[at..end] == *needle
            && src.boundary[at]
            && src.boundary.get(end).copied().unwrap_or(true)
    })
}

/// Parses `{"segments": [{"text", "label"}]}`, tolerating prose around the
/// object. Segments with an empty text, the `none` label, or a label outside
/// the mode's label set are dropped.
pub fn parse_tagging_response(
    raw: &str,
    mode: TaggingMode,
    q: &Question,
) -> Result<Vec<TaggedSegment>, HighlightError> {
    let fail = |why: &str| HighlightError::TaggingParseFailed(why.to_owned());
    let value = extract_object(raw).ok_or_else(|| fail("no JSON object in response"))?;
    let items = value
        .get("segments")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("missing `segments` array"))?;
    let labels = mode.labels(q);
    let mut out = Vec::new();
    for item in items {
        let (Some(text), Some(label)) = (
            item.get("text").and_then(Value::as_str),
            item.get("label").and_then(Value::as_str),
        ) else {
            return Err(fail("segment without string `text` and `label`"));
        };
        if text.trim().is_empty() || !labels.iter().any(|l| l == label) {
            continue;
        }
        out.push(TaggedSegment::new(text, label));
    }
    Ok(out)
}

fn extract_object(raw: &str) -> Option<Value> {
    let trimmed = raw.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    trimmed.match_indices('{').find_map(|(i, _)| {
        match serde_json::Deserializer::from_str(&trimmed[i..]).into_iter::<Value>().next() {
            Some(Ok(v @ Value::Object(_))) if v.get("segments").is_some() => Some(v),
            _ => None,
        }
    })
}

/// Errors from producing a highlight for a stored record.
#[derive(Debug, Error)]
pub enum HighlightRequestError {
    #[error("record {0} not found")]
    RecordNotFound(RecordId),
    #[error("record {0} is not completed")]
    RecordNotCompleted(RecordId),
    #[error("no highlight cached for record {0} in this mode")]
    NotComputed(RecordId),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tagging(#[from] HighlightError),
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl HighlightRequestError {
    pub fn code(&self) -> &'static str {
        match self {
            HighlightRequestError::RecordNotFound(_) => "record_not_found",
            HighlightRequestError::RecordNotCompleted(_) => "record_not_completed",
            HighlightRequestError::NotComputed(_) => "highlight_not_found",
            HighlightRequestError::Missing(_) => "not_found",
            HighlightRequestError::Prompt(e) => e.code(),
            HighlightRequestError::Tagging(e) => e.code(),
            HighlightRequestError::Provider(e) => e.code(),
            HighlightRequestError::Store(e) => e.code(),
        }
    }
}

/// Tags records through one tagging provider and caches results per
/// (record, mode).
pub struct Highlighter {
    store: Arc<dyn Repository>,
    gateway: Arc<Gateway>,
    prompts: Arc<PromptCompiler>,
    provider: ProviderId,
}

impl Highlighter {
    pub fn new(
        store: Arc<dyn Repository>,
        gateway: Arc<Gateway>,
        prompts: Arc<PromptCompiler>,
        provider: ProviderId,
    ) -> Self {
        Self { store, gateway, prompts, provider }
    }

    pub fn provider(&self) -> &ProviderId {
        &self.provider
    }

    pub async fn request_tags(
        &self,
        mode: TaggingMode,
        q: &Question,
        answer_text: &str,
        rationale: Option<&str>,
    ) -> Result<Vec<TaggedSegment>, HighlightRequestError> {
        let prompt = self.prompts.compile_tagging_prompt(mode, q, answer_text, rationale)?;
        let completion = self.gateway.generate(&self.provider, &prompt).await?;
        Ok(parse_tagging_response(&completion.text, mode, q)?)
    }

    /// Tags the record's answer (`key_elements`) or rationale
    /// (`rationale_aspects`), resolves spans and replaces the cached result.
    pub async fn highlight_record(
        &self,
        record_id: &RecordId,
        mode: TaggingMode,
    ) -> Result<HighlightResult, HighlightRequestError> {
        let record = self
            .store
            .get_record(record_id)?
            .ok_or_else(|| HighlightRequestError::RecordNotFound(record_id.clone()))?;
        if record.status != RecordStatus::Completed {
            return Err(HighlightRequestError::RecordNotCompleted(record_id.clone()));
        }
        let answer = self
            .store
            .get_answer(&record.answer_id)?
            .ok_or_else(|| HighlightRequestError::Missing(format!("answer {}", record.answer_id)))?;
        let q = self
            .store
            .get_question(&record.question_id)?
            .ok_or_else(|| HighlightRequestError::Missing(format!("question {}", record.question_id)))?;
        let rationale = record.rationale.clone().unwrap_or_default();
        let (source, rationale_arg) = match mode {
            TaggingMode::KeyElements => (answer.text.clone(), None),
            TaggingMode::RationaleAspects => (rationale.clone(), Some(rationale.as_str())),
        };
        let segments = self.request_tags(mode, &q, &answer.text, rationale_arg).await?;
        let Resolution { spans, unresolved } = resolve_spans(&source, &segments);
        let result = HighlightResult {
            record_id: record.id,
            mode,
            source_text: source,
            spans,
            unresolved,
        };
        self.store.put_highlight(&result)?;
        Ok(result)
    }

    pub fn cached(&self, record_id: &RecordId, mode: TaggingMode) -> Result<HighlightResult, HighlightRequestError> {
        if self.store.get_record(record_id)?.is_none() {
            return Err(HighlightRequestError::RecordNotFound(record_id.clone()));
        }
        self.store
            .get_highlight(record_id, mode)?
            .ok_or_else(|| HighlightRequestError::NotComputed(record_id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RubricItem;

    fn seg(t: &str, l: &str) -> TaggedSegment {
        TaggedSegment::new(t, l)
    }

    fn span(start: usize, end: usize, label: &str) -> HighlightSpan {
        HighlightSpan { start, end, label: label.into() }
    }

    #[test]
    fn single_word() {
        let r = resolve_spans("The cat sat", &[seg("cat", "positive")]);
        assert_eq!(r.spans, vec![span(4, 7, "positive")]);
        assert!(r.unresolved.is_empty());
    }

    #[test]
    fn absent_excerpt_is_unresolved() {
        let r = resolve_spans("The cat sat", &[seg("dog", "positive")]);
        assert!(r.spans.is_empty());
        assert_eq!(r.unresolved, vec![seg("dog", "positive")]);
    }

    #[test]
    fn duplicate_excerpt_is_matched_after_previous() {
        let r = resolve_spans("The x The y", &[seg("The", "a"), seg("The", "b")]);
        assert_eq!(r.spans, vec![span(0, 3, "a"), span(6, 9, "b")]);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(resolve_spans("anything", &[]), Resolution::default());
        assert_eq!(resolve_spans("", &[seg("x", "a")]).unresolved.len(), 1);
        assert_eq!(resolve_spans("abc", &[seg("  ", "a")]).unresolved.len(), 1);
    }

    #[test]
    fn case_and_whitespace_insensitive_offsets_index_original() {
        let src = "Use  the\n\tSAME   vinegar";
        let r = resolve_spans(src, &[seg("the same", "element_1"), seg(" Vinegar ", "element_2")]);
        assert_eq!(r.spans, vec![span(5, 14, "element_1"), span(17, 24, "element_2")]);
        let chars: Vec<char> = src.chars().collect();
        let got: String = chars[5..14].iter().collect();
        assert_eq!(normalize_for_match(&got), "the same");
    }

    #[test]
    fn offsets_are_char_indices() {
        let r = resolve_spans("café au lait", &[seg("AU", "positive")]);
        assert_eq!(r.spans, vec![span(5, 7, "positive")]);
    }

    #[test]
    fn later_segment_not_found_before_cursor() {
        let r = resolve_spans("b a", &[seg("a", "x"), seg("b", "y")]);
        assert_eq!(r.spans, vec![span(2, 3, "x")]);
        assert_eq!(r.unresolved, vec![seg("b", "y")]);
    }

    fn question() -> Question {
        Question {
            id: "q".into(),
            prompt_text: "p".into(),
            key_elements: vec!["one".into(), "two".into()],
            rubric: vec![RubricItem { points: 1, description: "d".into() }],
            max_mark: 2,
        }
    }

    #[test]
    fn tagging_response_label_filtering() {
        let q = question();
        let raw = r#"{"segments": [{"text": "a b", "label": "element_1"}, {"text": "c", "label": "elemnt_9"}, {"text": "d", "label": "none"}, {"text": "e", "label": "element_2"}]}"#;
        let segs = parse_tagging_response(raw, TaggingMode::KeyElements, &q).unwrap();
        assert_eq!(segs, vec![seg("a b", "element_1"), seg("e", "element_2")]);
        assert!(parse_tagging_response(r#"{"segments": []}"#, TaggingMode::KeyElements, &q)
            .unwrap()
            .is_empty());
        let rat = parse_tagging_response(
            r#"Here: {"segments": [{"text": "good", "label": "positive"}, {"text": "x", "label": "element_1"}]}"#,
            TaggingMode::RationaleAspects,
            &q,
        )
        .unwrap();
        assert_eq!(rat, vec![seg("good", "positive")]);
    }

    #[test]
    fn tagging_response_failures() {
        let q = question();
        for raw in ["", "no json", r#"{"segs": []}"#, r#"{"segments": [{"text": 1}]}"#] {
            assert!(
                parse_tagging_response(raw, TaggingMode::KeyElements, &q).is_err(),
                "{raw}"
            );
        }
    }
}
