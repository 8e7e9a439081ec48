//! Deterministic stand-in for a language model.
//!
//! Assessment prompts are scored by keyword overlap with the key answer
//! elements, tagging prompts are answered by quoting matching words, and
//! anything else gets a canned chat reply. Outputs depend only on the input
//! messages.

use std::collections::HashSet;

use async_trait::async_trait;
use serde_json::json;

use super::{ChatMessage, ProviderConfig, Role, Transport, TransportError, WireRequest};
use crate::model::{Mark, Question};
use crate::parse::format_assessment;
use crate::prompt::{
    TaggingMode, ANSWER_OPEN, BLOCK_CLOSE, KEY_ELEMENTS_HEADER, LABELS_PREFIX, MARK_RANGE_PREFIX,
    RATIONALE_OPEN, TAG_TARGET_PREFIX,
};

const MIN_CONTENT_WORD_CHARS: usize = 4;

fn normalize_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Lowercased, punctuation-stripped whitespace tokens of at least four
/// characters, in text order.
pub fn content_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|w| w.chars().count() >= MIN_CONTENT_WORD_CHARS)
        .collect()
}

/// An element counts as covered when at least half of its distinct content
/// words occur in the answer. Elements without content words never match.
fn coverage(key_elements: &[String], answer_text: &str) -> Vec<bool> {
    let answer: HashSet<String> = content_words(answer_text).into_iter().collect();
    key_elements
        .iter()
        .map(|e| {
            let words: HashSet<String> = content_words(e).into_iter().collect();
            let hits = words.iter().filter(|w| answer.contains(*w)).count();
            !words.is_empty() && 2 * hits >= words.len()
        })
        .collect()
}

/// The mock provider's scoring rule, rendered in the JSON output format the
/// assessment prompt asks for.
pub fn mock_assess(q: &Question, answer_text: &str) -> String {
    let covered = coverage(&q.key_elements, answer_text);
    let hits = covered.iter().filter(|c| **c).count() as Mark;
    let mark = hits.min(q.max_mark);
    let mut sentences: Vec<String> = covered
        .iter()
        .zip(&q.key_elements)
        .enumerate()
        .map(|(i, (hit, element))| {
            let element = element.split_whitespace().collect::<Vec<_>>().join(" ");
            if *hit {
                format!("Addresses key element {} ({element}).", i + 1)
            } else {
                format!("Does not address key element {} ({element}).", i + 1)
            }
        })
        .collect();
    sentences.push(format!("Awarded {mark} of {} marks.", q.max_mark));
    format_assessment(mark, &sentences.join(" "))
}

/// Tagging rule: in key-element mode every answer word that is a content word
/// of element k is tagged `element_k` (first matching element wins); in
/// rationale mode the "Addresses"/"Does not address" phrases are tagged
/// positive/negative.
pub fn mock_tag(
    mode: TaggingMode,
    key_elements: &[String],
    answer_text: &str,
    rationale: Option<&str>,
) -> String {
    let mut segments = Vec::new();
    match mode {
        TaggingMode::KeyElements => {
            let vocab: Vec<HashSet<String>> = key_elements
                .iter()
                .map(|e| content_words(e).into_iter().collect())
                .collect();
            for token in answer_text.split_whitespace() {
                let excerpt = token.trim_matches(|c: char| !c.is_alphanumeric());
                let norm = normalize_token(excerpt);
                if norm.chars().count() < MIN_CONTENT_WORD_CHARS {
                    continue;
                }
                if let Some(k) = vocab.iter().position(|v| v.contains(&norm)) {
                    segments.push(json!({ "text": excerpt, "label": format!("element_{}", k + 1) }));
                }
            }
        }
        TaggingMode::RationaleAspects => {
            let text = rationale.unwrap_or_default();
            let mut hits: Vec<(usize, String, &str)> = Vec::new();
            for (label, phrase) in [("negative", "Does not address key element"), ("positive", "Addresses key element")] {
                for (pos, _) in text.match_indices(phrase) {
                    let num: String = text[pos + phrase.len()..]
                        .chars()
                        .skip(1)
                        .take_while(char::is_ascii_digit)
                        .collect();
                    hits.push((pos, format!("{phrase} {num}"), label));
                }
            }
            hits.sort_by_key(|h| h.0);
            for (_, excerpt, label) in hits {
                segments.push(json!({ "text": excerpt, "label": label }));
            }
        }
    }
    json!({ "segments": segments }).to_string()
}

pub fn mock_chat_reply(messages: &[ChatMessage]) -> String {
    let turn = messages.iter().filter(|m| m.role == Role::User).count();
    let last = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.split_whitespace().count())
        .unwrap_or(0);
    let mut reply = format!("Mock reply to turn {turn}. Your message had {last} words.");
    if let Some(first) = messages.first().filter(|m| m.role == Role::System) {
        let n = first.content.matches("] Provider: ").count();
        reply.push_str(&format!(" The imported context holds {n} prior assessment(s)."));
    }
    reply
}

fn block<'a>(prompt: &'a str, open: &str) -> Option<&'a str> {
    let start = prompt.find(open)? + open.len();
    let len = prompt[start..].find(BLOCK_CLOSE)?;
    Some(&prompt[start..start + len])
}

fn key_elements(prompt: &str) -> Option<Vec<String>> {
    let start = prompt.find(KEY_ELEMENTS_HEADER)? + KEY_ELEMENTS_HEADER.len();
    let mut out = Vec::new();
    for line in prompt[start..].lines() {
        let Some((num, text)) = line.split_once(". ") else { break };
        if num.parse::<usize>().ok() != Some(out.len() + 1) {
            break;
        }
        out.push(text.to_owned());
    }
    (!out.is_empty()).then_some(out)
}

fn line_after<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    let start = prompt.find(prefix)? + prefix.len();
    prompt[start..].lines().next()
}

fn max_mark(prompt: &str) -> Option<Mark> {
    let rest = line_after(prompt, MARK_RANGE_PREFIX)?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn respond(messages: &[ChatMessage]) -> Result<String, TransportError> {
    let last = messages
        .last()
        .filter(|m| m.role == Role::User)
        .ok_or_else(|| TransportError::Rejected("last message must come from the user".into()))?;
    let prompt = last.content.as_str();
    let malformed = |what: &str| TransportError::Rejected(format!("malformed prompt: {what}"));

    if line_after(prompt, LABELS_PREFIX).is_some() {
        let mode = match line_after(prompt, TAG_TARGET_PREFIX) {
            Some("student answer") => TaggingMode::KeyElements,
            Some("assessment rationale") => TaggingMode::RationaleAspects,
            _ => return Err(malformed("unknown tagging target")),
        };
        let elements = key_elements(prompt).ok_or_else(|| malformed("no key answer elements"))?;
        let answer = block(prompt, ANSWER_OPEN).ok_or_else(|| malformed("no student answer"))?;
        let rationale = block(prompt, RATIONALE_OPEN);
        return Ok(mock_tag(mode, &elements, answer, rationale));
    }

    if prompt.contains(MARK_RANGE_PREFIX) && prompt.contains(ANSWER_OPEN) {
        let q = Question {
            id: "mock".into(),
            prompt_text: String::new(),
            key_elements: key_elements(prompt).ok_or_else(|| malformed("no key answer elements"))?,
            rubric: Vec::new(),
            max_mark: max_mark(prompt).ok_or_else(|| malformed("no mark range"))?,
        };
        let answer = block(prompt, ANSWER_OPEN).ok_or_else(|| malformed("no student answer"))?;
        return Ok(mock_assess(&q, answer));
    }

    Ok(mock_chat_reply(messages))
}

/// Transport for `kind = mock` providers.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTransport;

#[async_trait]
impl Transport for MockTransport {
    async fn complete(&self, _: &ProviderConfig, request: &WireRequest) -> Result<String, TransportError> {
        respond(&request.messages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RubricItem, StudentAnswer};
    use crate::parse::parse_model_output;
    use crate::prompt::PromptCompiler;

    fn question(max_mark: Mark) -> Question {
        Question {
            id: "q".into(),
            prompt_text: "What do you need to replicate the experiment?".into(),
            key_elements: vec![
                "specify the materials to be tested".into(),
                "specify the size of the containers".into(),
                "state the amount of vinegar used".into(),
            ],
            rubric: vec![RubricItem { points: 1, description: "one point per element".into() }],
            max_mark,
        }
    }

    fn via_prompt(q: &Question, text: &str) -> String {
        let a = StudentAnswer {
            id: "a".into(),
            question_id: q.id.clone(),
            text: text.into(),
            gold_mark: None,
        };
        let prompt = PromptCompiler::builtin().compile_assessment_prompt(q, &a);
        respond(&[ChatMessage::user(prompt)]).unwrap()
    }

    #[test]
    fn content_word_rule() {
        assert_eq!(
            content_words("Specify the materials, to be TESTED!"),
            vec!["specify", "materials", "tested"]
        );
        assert!(content_words("").is_empty());
    }

    #[test]
    fn hand_counted_marks() {
        // element 1 content words: specify, materials, tested  -> answer has materials, tested (2/3)
        // element 2 content words: specify, size, containers   -> answer has none (0/3)
        // element 3 content words: state, amount, vinegar, used -> answer has vinegar, amount (2/4)
        let q = question(3);
        let out = via_prompt(&q, "Which materials were tested and what amount of vinegar?");
        let p = parse_model_output(&out, 3).unwrap();
        assert_eq!(p.mark, 2);
        assert!(p.rationale.starts_with("Addresses key element 1"));
        assert!(p.rationale.contains("Does not address key element 2"));
    }

    #[test]
    fn verbatim_answer_scores_full_and_is_clamped() {
        let two = Question {
            key_elements: question(2).key_elements[..2].to_vec(),
            ..question(2)
        };
        let out = via_prompt(&two, "specify the materials to be tested; specify the size of the containers");
        assert_eq!(parse_model_output(&out, 2).unwrap().mark, 2);

        let q = question(2);
        let all = q.key_elements.join(". ");
        assert_eq!(parse_model_output(&via_prompt(&q, &all), 2).unwrap().mark, 2);
        assert_eq!(out, mock_assess(&two, "specify the materials to be tested; specify the size of the containers"));
    }

    #[test]
    fn empty_answer_scores_zero() {
        let q = question(3);
        assert_eq!(parse_model_output(&mock_assess(&q, ""), 3).unwrap().mark, 0);
    }

    #[test]
    fn malformed_prompt_rejected() {
        let bad = "Mark range: 0 to 3\nStudent answer:\n<<<\nno close";
        assert!(matches!(
            respond(&[ChatMessage::user(bad)]),
            Err(TransportError::Rejected(_))
        ));
    }

    #[test]
    fn tagging_via_prompt() {
        let q = question(3);
        let c = PromptCompiler::builtin();
        let p = c
            .compile_tagging_prompt(TaggingMode::KeyElements, &q, "The vinegar amount, and containers.", None)
            .unwrap();
        let out = respond(&[ChatMessage::user(p)]).unwrap();
        assert_eq!(
            out,
            r#"{"segments":[{"label":"element_3","text":"vinegar"},{"label":"element_3","text":"amount"},{"label":"element_2","text":"containers"}]}"#
        );

        let rationale = "Addresses key element 1 (x). Does not address key element 2 (y).";
        let p = c
            .compile_tagging_prompt(TaggingMode::RationaleAspects, &q, "ans", Some(rationale))
            .unwrap();
        let out = respond(&[ChatMessage::user(p)]).unwrap();
        assert_eq!(
            out,
            r#"{"segments":[{"label":"positive","text":"Addresses key element 1"},{"label":"negative","text":"Does not address key element 2"}]}"#
        );
    }

    #[test]
    fn chat_reply_is_deterministic() {
        let msgs = vec![
            ChatMessage { role: Role::System, content: "[1] Provider: a\n[2] Provider: b".into() },
            ChatMessage::user("why two marks?"),
        ];
        let r = respond(&msgs).unwrap();
        assert_eq!(r, respond(&msgs).unwrap());
        assert_eq!(
            r,
            "Mock reply to turn 1. Your message had 3 words. The imported context holds 2 prior assessment(s)."
        );
    }
}
