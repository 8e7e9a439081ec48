//! Domain vocabulary shared by every other module: questions, answers,
//! assessment records and annotation events, plus their validation.

use std::collections::HashSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            /// A fresh random identifier.
            pub fn generate() -> Self {
                Self(uuid::Uuid::new_v4().to_string())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_newtype!(QuestionId);
id_newtype!(AnswerId);
id_newtype!(RecordId);
id_newtype!(JobId);
id_newtype!(EventId);
id_newtype!(SessionId);
id_newtype!(UserId);
id_newtype!(
    /// Name under which a model provider is registered with the gateway.
    ProviderId
);

/// Provider id attached to human-authored rationales.
pub const HUMAN_PROVIDER: &str = "human";

/// A mark awarded under a point-based rubric. Marks are whole points.
pub type Mark = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricItem {
    pub points: Mark,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub prompt_text: String,
    /// Key answer elements, in the order they are presented to models.
    pub key_elements: Vec<String>,
    pub rubric: Vec<RubricItem>,
    /// Stored explicitly: rubric items may overlap or be alternatives.
    pub max_mark: Mark,
}

impl Question {
    pub fn mark_in_range(&self, mark: i64) -> bool {
        (0..=i64::from(self.max_mark)).contains(&mark)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionViolation {
    EmptyPromptText,
    MissingKeyElements,
    EmptyKeyElement,
    EmptyRubricDescription,
    RubricExceedsMaxMark,
}

/// Checks every question invariant and reports one violation per broken
/// invariant, in a fixed order.
pub fn validate_question(q: &Question) -> Vec<QuestionViolation> {
    let mut out = Vec::new();
    if q.prompt_text.trim().is_empty() {
        out.push(QuestionViolation::EmptyPromptText);
    }
    if q.key_elements.is_empty() {
        out.push(QuestionViolation::MissingKeyElements);
    } else if q.key_elements.iter().any(|e| e.trim().is_empty()) {
        out.push(QuestionViolation::EmptyKeyElement);
    }
    if q.rubric.iter().any(|r| r.description.trim().is_empty()) {
        out.push(QuestionViolation::EmptyRubricDescription);
    }
    if q.rubric.iter().any(|r| r.points > q.max_mark) {
        out.push(QuestionViolation::RubricExceedsMaxMark);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentAnswer {
    pub id: AnswerId,
    pub question_id: QuestionId,
    pub text: String,
    #[serde(default)]
    pub gold_mark: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerViolationKind {
    DuplicateId,
    EmptyText,
    GoldOutOfRange,
    WrongQuestion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerViolation {
    /// Position of the offending answer in the submitted batch.
    pub index: usize,
    pub answer_id: AnswerId,
    pub kind: AnswerViolationKind,
}

/// Flags duplicate ids, empty texts and out-of-range gold marks. The first
/// occurrence of an id is accepted; later ones are flagged.
pub fn validate_answer_batch(q: &Question, answers: &[StudentAnswer]) -> Vec<AnswerViolation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (index, a) in answers.iter().enumerate() {
        let mut flag = |kind| {
            out.push(AnswerViolation {
                index,
                answer_id: a.id.clone(),
                kind,
            })
        };
        if !seen.insert(&a.id) {
            flag(AnswerViolationKind::DuplicateId);
        }
        if a.question_id != q.id {
            flag(AnswerViolationKind::WrongQuestion);
        }
        if a.text.trim().is_empty() {
            flag(AnswerViolationKind::EmptyText);
        }
        if let Some(g) = a.gold_mark {
            if !q.mark_in_range(g) {
                flag(AnswerViolationKind::GoldOutOfRange);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    Running,
    Completed,
    ParseFailed,
    ProviderFailed,
}

impl RecordStatus {
    pub const ALL: [RecordStatus; 5] = [
        RecordStatus::Pending,
        RecordStatus::Running,
        RecordStatus::Completed,
        RecordStatus::ParseFailed,
        RecordStatus::ProviderFailed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RecordStatus::Completed | RecordStatus::ParseFailed | RecordStatus::ProviderFailed
        )
    }

    /// Legal single-step transitions: pending→running→terminal. The
    /// running→pending reset is only performed by crash recovery.
    pub fn can_transition_to(self, next: RecordStatus) -> bool {
        match self {
            RecordStatus::Pending => next == RecordStatus::Running,
            RecordStatus::Running => next.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Pending => "pending",
            RecordStatus::Running => "running",
            RecordStatus::Completed => "completed",
            RecordStatus::ParseFailed => "parse_failed",
            RecordStatus::ProviderFailed => "provider_failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Where an assessment record came from. Only batch records feed metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordOrigin {
    #[default]
    Batch,
    Chat,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub id: RecordId,
    pub job_id: Option<JobId>,
    pub question_id: QuestionId,
    pub answer_id: AnswerId,
    pub provider_id: ProviderId,
    pub origin: RecordOrigin,
    pub status: RecordStatus,
    pub mark: Option<Mark>,
    pub rationale: Option<String>,
    pub raw_output: Option<String>,
    /// Failure reason for parse_failed / provider_failed records.
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl AssessmentRecord {
    pub fn pending(
        job_id: Option<JobId>,
        question_id: QuestionId,
        answer_id: AnswerId,
        provider_id: ProviderId,
        origin: RecordOrigin,
    ) -> Self {
        Self {
            id: RecordId::generate(),
            job_id,
            question_id,
            answer_id,
            provider_id,
            origin,
            status: RecordStatus::Pending,
            mark: None,
            rationale: None,
            raw_output: None,
            failure: None,
            created_at: Utc::now(),
            finished_at: None,
        }
    }

    /// Checked at the persistence boundary: completed ⇔ mark and rationale
    /// are both present.
    pub fn is_consistent(&self) -> bool {
        let has_result = self.mark.is_some() && self.rationale.is_some();
        if self.status == RecordStatus::Completed {
            has_result
        } else {
            self.mark.is_none()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceFlag {
    Preferred,
    NotPreferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationPayload {
    GoldCorrection {
        answer_id: AnswerId,
        mark: Mark,
    },
    Preference {
        record_id: RecordId,
        flag: PreferenceFlag,
    },
    AuthoredRationale {
        answer_id: AnswerId,
        /// The human record created to hold this rationale.
        record_id: RecordId,
        mark: Mark,
        rationale: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub id: EventId,
    pub question_id: QuestionId,
    pub author: UserId,
    pub timestamp: DateTime<Utc>,
    pub payload: AnnotationPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserRole {
    Educator,
    Researcher,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: UserId,
    pub display_name: String,
    pub role: UserRole,
    #[serde(skip)]
    pub credential_hash: String,
}
