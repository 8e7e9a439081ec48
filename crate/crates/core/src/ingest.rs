//! Answer-batch upload files: CSV with header `answer_id,answer_text,gold_mark`
//! or JSONL objects with the same field names. `gold_mark` may be empty or
//! absent; when present it must be a whole number.

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::model::{QuestionId, StudentAnswer};

pub const DEFAULT_MAX_ROWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UploadFormat {
    Csv,
    Jsonl,
}

impl UploadFormat {
    /// Guesses the format from a file name or media type.
    pub fn detect(hint: &str) -> Option<Self> {
        let h = hint.to_ascii_lowercase();
        if h.ends_with(".csv") || h.contains("text/csv") {
            Some(UploadFormat::Csv)
        } else if h.ends_with(".jsonl")
            || h.ends_with(".ndjson")
            || h.contains("jsonl")
            || h.contains("ndjson")
            || h.contains("json-seq")
        {
            Some(UploadFormat::Jsonl)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("upload exceeds {limit} rows")]
    TooManyRows { limit: usize },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("row {row}: gold mark `{value}` is not a whole number")]
    BadGoldMark { row: usize, value: String },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::TooManyRows { .. } => "too_many_rows",
            IngestError::MissingColumn(_) => "missing_column",
            IngestError::BadRow { .. } => "malformed_upload",
            IngestError::BadGoldMark { .. } => "invalid_gold_mark",
        }
    }
}

#[derive(Debug, Deserialize)]
struct JsonRow {
    answer_id: Value,
    answer_text: String,
    #[serde(default)]
    gold_mark: Option<Value>,
}

/// Parses an upload. Rows are numbered from 1 (excluding any CSV header).
pub fn parse_upload(
    format: UploadFormat,
    data: &str,
    question_id: &QuestionId,
    max_rows: usize,
) -> Result<Vec<StudentAnswer>, IngestError> {
    let data = data.strip_prefix('\u{feff}').unwrap_or(data);
    let rows = match format {
        UploadFormat::Csv => parse_csv(data, max_rows)?,
        UploadFormat::Jsonl => parse_jsonl(data, max_rows)?,
    };
    Ok(rows
        .into_iter()
        .map(|(id, text, gold_mark)| StudentAnswer {
            id: id.into(),
            question_id: question_id.clone(),
            text,
            gold_mark,
        })
        .collect())
}

type Row = (String, String, Option<i64>);

fn parse_csv(data: &str, max_rows: usize) -> Result<Vec<Row>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .flexible(true)
        .from_reader(data.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::BadRow { row: 0, message: e.to_string() })?
        .clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let id_col = col("answer_id").ok_or(IngestError::MissingColumn("answer_id"))?;
    let text_col = col("answer_text").ok_or(IngestError::MissingColumn("answer_text"))?;
    let gold_col = col("gold_mark");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        if row > max_rows {
            return Err(IngestError::TooManyRows { limit: max_rows });
        }
        let rec = rec.map_err(|e| IngestError::BadRow { row, message: e.to_string() })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let gold = match gold_col.map(field).map(str::trim) {
            None | Some("") => None,
            Some(v) => Some(v.parse::<i64>().map_err(|_| IngestError::BadGoldMark {
                row,
                value: v.to_owned(),
            })?),
        };
        out.push((field(id_col).trim().to_owned(), field(text_col).to_owned(), gold));
    }
    Ok(out)
}

fn parse_jsonl(data: &str, max_rows: usize) -> Result<Vec<Row>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in data.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row = i + 1;
        if row > max_rows {
            return Err(IngestError::TooManyRows { limit: max_rows });
        }
        let r: JsonRow = serde_json::from_str(line)
            .map_err(|e| IngestError::BadRow { row, message: e.to_string() })?;
        let id = match r.answer_id {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            other => {
                return Err(IngestError::BadRow {
                    row,
                    message: format!("answer_id must be a string or number, got {other}"),
                })
            }
        };
        let gold = match r.gold_mark {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.trim().is_empty() => None,
            Some(Value::Number(n)) if n.as_i64().is_some() => n.as_i64(),
            Some(Value::String(s)) => Some(s.trim().parse::<i64>().map_err(|_| {
                IngestError::BadGoldMark { row, value: s.clone() }
            })?),
            Some(other) => {
                return Err(IngestError::BadGoldMark {
                    row,
                    value: other.to_string(),
                })
            }
        };
        out.push((id, r.answer_text, gold));
    }
    Ok(out)
}
