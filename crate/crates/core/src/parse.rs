//! Extraction of `(mark, rationale)` from raw model output.
//!
//! Three stages are tried in order:
//! 1. the whole output is a JSON object with an integer `mark` and a string
//!    `rationale`;
//! 2. the first JSON object carrying a `mark` key embedded in prose;
//! 3. a `mark: <integer>` fallback, with the rest of the text as rationale.
//!
//! A mark outside the question's range is a failure, never clamped.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::Mark;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("no mark found in model output")]
    NoMarkFound,
    #[error("mark outside the permitted range")]
    MarkOutOfRange,
    #[error("model output contains malformed JSON and no fallback mark")]
    MalformedJsonAndNoFallback,
}

impl ParseFailure {
    pub fn code(self) -> &'static str {
        match self {
            ParseFailure::NoMarkFound => "no_mark_found",
            ParseFailure::MarkOutOfRange => "mark_out_of_range",
            ParseFailure::MalformedJsonAndNoFallback => "malformed_json_and_no_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAssessment {
    pub mark: Mark,
    pub rationale: String,
}

static FALLBACK_MARK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bmark\s*:\s*(-?\d+)\b").unwrap());

/// Renders the stage-1 output format requested by the assessment prompt.
pub fn format_assessment(mark: Mark, rationale: &str) -> String {
    serde_json::json!({ "mark": mark, "rationale": rationale }).to_string()
}

pub fn parse_model_output(raw: &str, max_mark: Mark) -> Result<ParsedAssessment, ParseFailure> {
    let trimmed = raw.trim();
    let mut saw_broken_json = false;

    // Stage 1: the whole output is the object.
    match serde_json::from_str::<Value>(trimmed) {
        Ok(Value::Object(obj)) => return from_object(&obj, max_mark),
        Ok(_) => {}
        Err(_) => saw_broken_json |= trimmed.contains('{'),
    }

    // Stage 2: first embedded object that carries a mark.
    for (start, _) in trimmed.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(obj))) if obj.contains_key("mark") => {
                return from_object(&obj, max_mark)
            }
            Some(Ok(_)) => {}
            Some(Err(_)) | None => saw_broken_json = true,
        }
    }

    // Stage 3: `mark: <n>` anywhere, first occurrence wins.
    if let Some(caps) = FALLBACK_MARK.captures(trimmed) {
        let whole = caps.get(0).unwrap();
        let mark = caps[1].parse::<i64>().map_err(|_| ParseFailure::MarkOutOfRange)?;
        let mark = check_range(mark, max_mark)?;
        let rationale = format!("{}{}", &trimmed[..whole.start()], &trimmed[whole.end()..]);
        return Ok(ParsedAssessment {
            mark,
            rationale: rationale.trim().to_owned(),
        });
    }

    if saw_broken_json {
        Err(ParseFailure::MalformedJsonAndNoFallback)
    } else {
        Err(ParseFailure::NoMarkFound)
    }
}

fn from_object(obj: &Map<String, Value>, max_mark: Mark) -> Result<ParsedAssessment, ParseFailure> {
    let mark = match obj.get("mark") {
        Some(Value::Number(n)) => match (n.as_i64(), n.as_u64()) {
            (Some(m), _) => m,
            // Larger than i64::MAX: certainly out of range.
            (None, Some(_)) => return Err(ParseFailure::MarkOutOfRange),
            // Fractional marks are not marks.
            (None, None) => return Err(ParseFailure::NoMarkFound),
        },
        _ => return Err(ParseFailure::NoMarkFound),
    };
    let mark = check_range(mark, max_mark)?;
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(ParseFailure::NoMarkFound),
    };
    Ok(ParsedAssessment { mark, rationale })
}

fn check_range(mark: i64, max_mark: Mark) -> Result<Mark, ParseFailure> {
    if (0..=i64::from(max_mark)).contains(&mark) {
        Ok(mark as Mark)
    } else {
        Err(ParseFailure::MarkOutOfRange)
    }
}
