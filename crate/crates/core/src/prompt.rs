//! Deterministic prompt compilation from `{{placeholder}}` templates.
//!
//! Three templates are used: `assessment`, `tagging` and `chat_context`.
//! Built-in wording ships with the crate; a template directory can override
//! any of them with a file named `<name>.tmpl`. Rendering is a single pass,
//! so text substituted into a placeholder is never itself expanded.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AssessmentRecord, Question, StudentAnswer};

/// Header of the student answer block. The mock provider and the tagging
/// mock rely on these markers.
pub(crate) const ANSWER_OPEN: &str = "Student answer:\n<<<\n";
pub(crate) const RATIONALE_OPEN: &str = "Assessment rationale:\n<<<\n";
pub(crate) const BLOCK_CLOSE: &str = "\n>>>\n";
pub(crate) const KEY_ELEMENTS_HEADER: &str = "Key answer elements:\n";
pub(crate) const MARK_RANGE_PREFIX: &str = "Mark range: 0 to ";
pub(crate) const LABELS_PREFIX: &str = "Labels: ";
pub(crate) const TAG_TARGET_PREFIX: &str = "Text to tag: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    PromptText,
    KeyElements,
    Rubric,
    StudentAnswer,
    Rationale,
    Mode,
    Assessments,
}

impl Placeholder {
    const ALL: [Placeholder; 7] = [
        Placeholder::PromptText,
        Placeholder::KeyElements,
        Placeholder::Rubric,
        Placeholder::StudentAnswer,
        Placeholder::Rationale,
        Placeholder::Mode,
        Placeholder::Assessments,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::PromptText => "prompt_text",
            Placeholder::KeyElements => "key_elements",
            Placeholder::Rubric => "rubric",
            Placeholder::StudentAnswer => "student_answer",
            Placeholder::Rationale => "rationale",
            Placeholder::Mode => "mode",
            Placeholder::Assessments => "assessments",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Assessment,
    Tagging,
    ChatContext,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [
        TemplateKind::Assessment,
        TemplateKind::Tagging,
        TemplateKind::ChatContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Assessment => "assessment",
            TemplateKind::Tagging => "tagging",
            TemplateKind::ChatContext => "chat_context",
        }
    }

    /// Placeholders the compiler binds for this template. Anything else in a
    /// template file is rejected at load time.
    pub fn allowed(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateKind::Assessment => &[PromptText, KeyElements, Rubric, StudentAnswer],
            TemplateKind::Tagging => &[
                PromptText,
                KeyElements,
                Rubric,
                StudentAnswer,
                Rationale,
                Mode,
            ],
            TemplateKind::ChatContext => &[PromptText, KeyElements, Rubric, Assessments],
        }
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateKind::Assessment => include_str!("../templates/assessment.tmpl"),
            TemplateKind::Tagging => include_str!("../templates/tagging.tmpl"),
            TemplateKind::ChatContext => include_str!("../templates/chat_context.tmpl"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}`: unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}`: malformed placeholder at byte {offset}")]
    Malformed { template: String, offset: usize },
    #[error("template `{template}`: {source}")]
    Io {
        template: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid tagging request: {0}")]
    InvalidTaggingRequest(&'static str),
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        "invalid_tagging_request"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    segments: Vec<Segment>,
}

#[derive(Debug, Default)]
struct Bindings<'a> {
    prompt_text: &'a str,
    key_elements: &'a str,
    rubric: &'a str,
    student_answer: &'a str,
    rationale: &'a str,
    mode: &'a str,
    assessments: &'a str,
}

impl<'a> Bindings<'a> {
    fn get(&self, p: Placeholder) -> &'a str {
        match p {
            Placeholder::PromptText => self.prompt_text,
            Placeholder::KeyElements => self.key_elements,
            Placeholder::Rubric => self.rubric,
            Placeholder::StudentAnswer => self.student_answer,
            Placeholder::Rationale => self.rationale,
            Placeholder::Mode => self.mode,
            Placeholder::Assessments => self.assessments,
        }
    }
}

impl PromptTemplate {
    pub fn parse(name: &str, source: &str, allowed: &[Placeholder]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut rest = source;
        let mut consumed = 0;
        while let Some(open) = rest.find("{{") {
            let malformed = || TemplateError::Malformed {
                template: name.to_owned(),
                offset: consumed + open,
            };
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(malformed)?;
            let inner = after[..close].trim();
            if inner.is_empty() || !inner.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                return Err(malformed());
            }
            let slot = Placeholder::from_name(inner)
                .filter(|p| allowed.contains(p))
                .ok_or_else(|| TemplateError::UnknownPlaceholder {
                    template: name.to_owned(),
                    name: inner.to_owned(),
                })?;
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_owned()));
            }
            segments.push(Segment::Slot(slot));
            let advance = open + 2 + close + 2;
            consumed += advance;
            rest = &rest[advance..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_owned()));
        }
        Ok(Self {
            name: name.to_owned(),
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> impl Iterator<Item = Placeholder> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(*p),
            Segment::Literal(_) => None,
        })
    }

    fn render(&self, b: &Bindings<'_>) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => out.push_str(l),
                Segment::Slot(p) => out.push_str(b.get(*p)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggingMode {
    KeyElements,
    RationaleAspects,
}

impl TaggingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaggingMode::KeyElements => "key_elements",
            TaggingMode::RationaleAspects => "rationale_aspects",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "key_elements" => Some(TaggingMode::KeyElements),
            "rationale_aspects" => Some(TaggingMode::RationaleAspects),
            _ => None,
        }
    }

    /// Labels a tagger may emit for this mode, excluding `none`.
    pub fn labels(self, q: &Question) -> Vec<String> {
        match self {
            TaggingMode::KeyElements => (1..=q.key_elements.len())
                .map(|k| format!("element_{k}"))
                .collect(),
            TaggingMode::RationaleAspects => vec!["positive".into(), "negative".into()],
        }
    }
}

/// One prior assessment imported into a chat context.
#[derive(Debug, Clone, Copy)]
pub struct ContextEntry<'a> {
    pub record: &'a AssessmentRecord,
    pub answer_text: &'a str,
}

#[derive(Debug, Clone)]
pub struct PromptCompiler {
    assessment: PromptTemplate,
    tagging: PromptTemplate,
    chat_context: PromptTemplate,
}

impl Default for PromptCompiler {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptCompiler {
    pub fn builtin() -> Self {
        let load = |k: TemplateKind| {
            PromptTemplate::parse(k.name(), k.builtin_source(), k.allowed())
                .expect("built-in templates are well-formed")
        };
        Self {
            assessment: load(TemplateKind::Assessment),
            tagging: load(TemplateKind::Tagging),
            chat_context: load(TemplateKind::ChatContext),
        }
    }

    /// Loads `<name>.tmpl` overrides from `dir`, falling back to the built-in
    /// wording for any file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut c = Self::builtin();
        for kind in TemplateKind::ALL {
            let path = dir.join(format!("{}.tmpl", kind.name()));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                template: kind.name().to_owned(),
                source,
            })?;
            let t = PromptTemplate::parse(kind.name(), &source, kind.allowed())?;
            match kind {
                TemplateKind::Assessment => c.assessment = t,
                TemplateKind::Tagging => c.tagging = t,
                TemplateKind::ChatContext => c.chat_context = t,
            }
        }
        Ok(c)
    }

    /// The answer text is inserted verbatim so that highlight offsets refer to
    /// the original text. Gold marks are never included.
    pub fn compile_assessment_prompt(&self, q: &Question, a: &StudentAnswer) -> String {
        self.assessment_prompt_for_text(q, &a.text)
    }

    pub fn assessment_prompt_for_text(&self, q: &Question, answer_text: &str) -> String {
        let key_elements = render_key_elements(q);
        let rubric = render_rubric(q);
        self.assessment.render(&Bindings {
            prompt_text: &q.prompt_text,
            key_elements: &key_elements,
            rubric: &rubric,
            student_answer: answer_text,
            ..Bindings::default()
        })
    }

    /// `answer_text` is always the student answer. In rationale mode the
    /// rationale is the text to tag and must be present; in key-element mode
    /// it must be absent.
    pub fn compile_tagging_prompt(
        &self,
        mode: TaggingMode,
        q: &Question,
        answer_text: &str,
        rationale: Option<&str>,
    ) -> Result<String, PromptError> {
        if answer_text.trim().is_empty() {
            return Err(PromptError::InvalidTaggingRequest("empty student answer"));
        }
        let rationale_block = match (mode, rationale) {
            (TaggingMode::KeyElements, None) => String::new(),
            (TaggingMode::KeyElements, Some(_)) => {
                return Err(PromptError::InvalidTaggingRequest(
                    "key_elements mode tags the student answer and takes no rationale",
                ))
            }
            (TaggingMode::RationaleAspects, Some(r)) if !r.trim().is_empty() => {
                format!("{RATIONALE_OPEN}{r}{BLOCK_CLOSE}\n")
            }
            (TaggingMode::RationaleAspects, _) => {
                return Err(PromptError::InvalidTaggingRequest(
                    "rationale_aspects mode requires a rationale",
                ))
            }
        };
        let mode_block = render_mode(mode, q);
        let key_elements = render_key_elements(q);
        let rubric = render_rubric(q);
        Ok(self.tagging.render(&Bindings {
            prompt_text: &q.prompt_text,
            key_elements: &key_elements,
            rubric: &rubric,
            student_answer: answer_text,
            rationale: &rationale_block,
            mode: &mode_block,
            ..Bindings::default()
        }))
    }

    /// Entries are ordered by record creation time (ties by record id).
    pub fn compile_chat_context(&self, q: &Question, entries: &[ContextEntry<'_>]) -> String {
        let mut sorted: Vec<_> = entries.to_vec();
        sorted.sort_by(|a, b| {
            (a.record.created_at, &a.record.id).cmp(&(b.record.created_at, &b.record.id))
        });
        let mut assessments = String::new();
        if sorted.is_empty() {
            assessments.push_str("No prior assessments.");
        }
        for (i, e) in sorted.iter().enumerate() {
            if i > 0 {
                assessments.push_str("\n\n");
            }
            let r = e.record;
            let _ = write!(
                assessments,
                "[{n}] Provider: {provider}\nAnswer ID: {answer}\n{ANSWER_OPEN}{text}{BLOCK_CLOSE}",
                n = i + 1,
                provider = r.provider_id,
                answer = r.answer_id,
                text = e.answer_text,
            );
            match (r.mark, &r.rationale) {
                (Some(m), Some(rat)) => {
                    let _ = write!(assessments, "Mark: {m}\nRationale: {rat}");
                }
                _ => {
                    let _ = write!(assessments, "Status: {}", r.status.as_str());
                }
            }
        }
        let key_elements = render_key_elements(q);
        let rubric = render_rubric(q);
        self.chat_context.render(&Bindings {
            prompt_text: &q.prompt_text,
            key_elements: &key_elements,
            rubric: &rubric,
            assessments: &assessments,
            ..Bindings::default()
        })
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render_key_elements(q: &Question) -> String {
    q.key_elements
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}", i + 1, single_line(e)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_rubric(q: &Question) -> String {
    let mut out = format!("{MARK_RANGE_PREFIX}{} (whole points only)", q.max_mark);
    for item in &q.rubric {
        let unit = if item.points == 1 { "point" } else { "points" };
        let _ = write!(
            out,
            "\n- {} {unit}: {}",
            item.points,
            single_line(&item.description)
        );
    }
    out
}

fn render_mode(mode: TaggingMode, q: &Question) -> String {
    let mut labels = mode.labels(q);
    labels.push("none".into());
    let labels = labels.join(", ");
    match mode {
        TaggingMode::KeyElements => format!(
            "Task: tag the words in the student answer that express a key answer element. \
             Label element_k means the words express key answer element k.\n\
             {TAG_TARGET_PREFIX}student answer\n{LABELS_PREFIX}{labels}"
        ),
        TaggingMode::RationaleAspects => format!(
            "Task: tag the positive aspects (reasons for awarding points) and the negative \
             aspects (reasons for deducting points) in the assessment rationale.\n\
             {TAG_TARGET_PREFIX}assessment rationale\n{LABELS_PREFIX}{labels}"
        ),
    }
}
