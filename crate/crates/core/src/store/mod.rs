//! Persistence contract shared by every service, with an in-memory
//! implementation for tests and a SQLite implementation for deployment.
//!
//! All writes are transactional per call, and reads observe every write that
//! has returned. Status changes on assessment records are compare-and-set so
//! that several workers (or several server processes) can share a store.

mod memory;
mod sqlite;

use thiserror::Error;

use crate::chat::{ChatSession, SessionMessage};
use crate::engine::{BatchJob, JobState};
use crate::highlight::HighlightResult;
use crate::model::{
    AnnotationEvent, AnswerId, AssessmentRecord, JobId, Question, QuestionId, RecordId,
    RecordStatus, SessionId, StudentAnswer, UserProfile,
};
use crate::prompt::TaggingMode;

pub use memory::MemoryStore;
pub use sqlite::SqliteStore;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("already exists: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    /// A write would break a persisted-data invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("storage backend error: {0}")]
    Backend(String),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Conflict(_) => "conflict",
            StoreError::NotFound(_) => "not_found",
            StoreError::Invariant(_) => "invariant_violation",
            StoreError::Backend(_) => "storage_error",
        }
    }
}

pub type StoreResult<T> = Result<T, StoreError>;

/// Jobs and records released by crash recovery.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovered {
    pub jobs: Vec<JobId>,
    pub records: usize,
    pub sessions: usize,
}

pub trait Repository: Send + Sync {
    fn insert_question(&self, q: &Question) -> StoreResult<()>;
    fn get_question(&self, id: &QuestionId) -> StoreResult<Option<Question>>;
    fn list_questions(&self) -> StoreResult<Vec<Question>>;

    /// Inserts all answers or none. Any id already present is a conflict.
    fn insert_answers(&self, answers: &[StudentAnswer]) -> StoreResult<()>;
    fn get_answer(&self, id: &AnswerId) -> StoreResult<Option<StudentAnswer>>;
    /// Answers of a question in upload order.
    fn list_answers(&self, question_id: &QuestionId) -> StoreResult<Vec<StudentAnswer>>;

    /// Persists a job together with its pending records.
    fn insert_job(&self, job: &BatchJob, records: &[AssessmentRecord]) -> StoreResult<()>;
    fn get_job(&self, id: &JobId) -> StoreResult<Option<BatchJob>>;
    /// Compare-and-set on the job state. Returns false if the current state
    /// is not `from`.
    fn transition_job(&self, id: &JobId, from: JobState, to: JobState) -> StoreResult<bool>;

    /// Inserts a record created outside a job (human-authored rationales).
    fn insert_record(&self, record: &AssessmentRecord) -> StoreResult<()>;
    fn get_record(&self, id: &RecordId) -> StoreResult<Option<AssessmentRecord>>;
    /// Records of a job in creation order.
    fn job_records(&self, job_id: &JobId) -> StoreResult<Vec<AssessmentRecord>>;
    fn answer_records(&self, answer_id: &AnswerId) -> StoreResult<Vec<AssessmentRecord>>;
    fn question_records(&self, question_id: &QuestionId) -> StoreResult<Vec<AssessmentRecord>>;
    /// Replaces a record if its stored status is still `expected`. The new
    /// status must be a legal successor and the record internally
    /// consistent. Returns false when another writer got there first.
    fn update_record(&self, expected: RecordStatus, record: &AssessmentRecord) -> StoreResult<bool>;

    /// Startup recovery: running records go back to pending, running jobs go
    /// back to idle (and are returned for re-execution), busy chat sessions
    /// are released.
    fn recover_interrupted(&self) -> StoreResult<Recovered>;

    fn append_event(&self, event: &AnnotationEvent) -> StoreResult<()>;
    /// Events of a question in append order.
    fn question_events(&self, question_id: &QuestionId) -> StoreResult<Vec<AnnotationEvent>>;

    fn put_highlight(&self, result: &HighlightResult) -> StoreResult<()>;
    fn get_highlight(&self, record_id: &RecordId, mode: TaggingMode) -> StoreResult<Option<HighlightResult>>;

    fn insert_session(&self, session: &ChatSession) -> StoreResult<()>;
    fn get_session(&self, id: &SessionId) -> StoreResult<Option<ChatSession>>;
    fn append_messages(&self, id: &SessionId, messages: &[SessionMessage]) -> StoreResult<()>;
    /// Marks a session busy. Returns false if it already was.
    fn try_acquire_session(&self, id: &SessionId) -> StoreResult<bool>;
    fn release_session(&self, id: &SessionId) -> StoreResult<()>;

    fn insert_user(&self, user: &UserProfile) -> StoreResult<()>;
    fn user_by_credential(&self, credential_hash: &str) -> StoreResult<Option<UserProfile>>;
    fn list_users(&self) -> StoreResult<Vec<UserProfile>>;
}

pub(crate) fn check_update(
    current: RecordStatus,
    expected: RecordStatus,
    next: &AssessmentRecord,
) -> StoreResult<bool> {
    if !expected.can_transition_to(next.status) {
        return Err(StoreError::Invariant(format!(
            "illegal transition {} -> {}",
            expected.as_str(),
            next.status.as_str()
        )));
    }
    check_record(next)?;
    Ok(current == expected)
}

pub(crate) fn check_record(r: &AssessmentRecord) -> StoreResult<()> {
    if r.is_consistent() {
        Ok(())
    } else {
        Err(StoreError::Invariant(format!(
            "record {} has status {} but mark {:?} / rationale present = {}",
            r.id,
            r.status.as_str(),
            r.mark,
            r.rationale.is_some()
        )))
    }
}

#[cfg(test)]
pub(crate) mod contract {
    //! Behaviour every `Repository` must show; run against both backends.

    use super::*;
    use crate::chat::ImportedContext;
    use crate::gateway::Role;
    use crate::model::{
        AnnotationPayload, EventId, PreferenceFlag, ProviderId, RecordOrigin, RubricItem, UserRole,
    };
    use chrono::Utc;

    fn question(id: &str) -> Question {
        Question {
            id: id.into(),
            prompt_text: "p".into(),
            key_elements: vec!["k".into()],
            rubric: vec![RubricItem { points: 1, description: "d".into() }],
            max_mark: 2,
        }
    }

    fn answer(id: &str, q: &str) -> StudentAnswer {
        StudentAnswer {
            id: id.into(),
            question_id: q.into(),
            text: format!("text {id}"),
            gold_mark: Some(1),
        }
    }

    fn job(q: &str, answers: &[&str]) -> (BatchJob, Vec<AssessmentRecord>) {
        let job = BatchJob::new(
            q.into(),
            answers.iter().map(|a| AnswerId::from(*a)).collect(),
            vec![ProviderId::from("mock")],
            RecordOrigin::Batch,
            None,
        );
        let records = job.pending_records();
        (job, records)
    }

    pub fn exercise(store: &dyn Repository) {
        // questions
        store.insert_question(&question("q1")).unwrap();
        assert!(matches!(store.insert_question(&question("q1")), Err(StoreError::Conflict(_))));
        assert_eq!(store.get_question(&"q1".into()).unwrap().unwrap(), question("q1"));
        assert!(store.get_question(&"nope".into()).unwrap().is_none());

        // answers: all-or-nothing, ordered
        store.insert_answers(&[answer("b", "q1"), answer("a", "q1")]).unwrap();
        assert!(store.insert_answers(&[answer("c", "q1"), answer("a", "q1")]).is_err());
        assert!(store.get_answer(&"c".into()).unwrap().is_none());
        let ids: Vec<_> = store.list_answers(&"q1".into()).unwrap().into_iter().map(|a| a.id.0).collect();
        assert_eq!(ids, vec!["b", "a"]);

        // jobs and record CAS
        let (j, records) = job("q1", &["b", "a"]);
        store.insert_job(&j, &records).unwrap();
        assert_eq!(store.job_records(&j.id).unwrap(), records);
        assert!(store.transition_job(&j.id, JobState::Idle, JobState::Running).unwrap());
        assert!(!store.transition_job(&j.id, JobState::Idle, JobState::Running).unwrap());

        let mut r = records[0].clone();
        r.status = RecordStatus::Running;
        assert!(store.update_record(RecordStatus::Pending, &r).unwrap());
        assert!(!store.update_record(RecordStatus::Pending, &r).unwrap());

        let mut bad = r.clone();
        bad.status = RecordStatus::Completed;
        assert!(matches!(
            store.update_record(RecordStatus::Running, &bad),
            Err(StoreError::Invariant(_))
        ));
        let mut done = r.clone();
        done.status = RecordStatus::Completed;
        done.mark = Some(1);
        done.rationale = Some("ok".into());
        assert!(store.update_record(RecordStatus::Running, &done).unwrap());
        assert_eq!(store.get_record(&done.id).unwrap().unwrap(), done);
        assert!(store
            .update_record(RecordStatus::Completed, &done)
            .is_err());

        // recovery
        let mut r2 = records[1].clone();
        r2.status = RecordStatus::Running;
        assert!(store.update_record(RecordStatus::Pending, &r2).unwrap());
        let rec = store.recover_interrupted().unwrap();
        assert_eq!(rec.jobs, vec![j.id.clone()]);
        assert_eq!(rec.records, 1);
        assert_eq!(store.get_record(&r2.id).unwrap().unwrap().status, RecordStatus::Pending);
        assert_eq!(store.get_job(&j.id).unwrap().unwrap().state, JobState::Idle);
        assert_eq!(store.answer_records(&"a".into()).unwrap().len(), 1);
        assert_eq!(store.question_records(&"q1".into()).unwrap().len(), 2);

        // events in append order
        for (i, flag) in [PreferenceFlag::Preferred, PreferenceFlag::NotPreferred].into_iter().enumerate() {
            store
                .append_event(&AnnotationEvent {
                    id: EventId::from(format!("e{i}")),
                    question_id: "q1".into(),
                    author: "u".into(),
                    timestamp: Utc::now(),
                    payload: AnnotationPayload::Preference { record_id: done.id.clone(), flag },
                })
                .unwrap();
        }
        let evs = store.question_events(&"q1".into()).unwrap();
        assert_eq!(evs.iter().map(|e| e.id.0.as_str()).collect::<Vec<_>>(), vec!["e0", "e1"]);

        // highlights keyed by (record, mode), replaced on put
        let mut h = HighlightResult {
            record_id: done.id.clone(),
            mode: TaggingMode::KeyElements,
            source_text: "t".into(),
            spans: vec![],
            unresolved: vec![],
        };
        store.put_highlight(&h).unwrap();
        h.source_text = "t2".into();
        store.put_highlight(&h).unwrap();
        assert_eq!(store.get_highlight(&done.id, TaggingMode::KeyElements).unwrap().unwrap(), h);
        assert!(store.get_highlight(&done.id, TaggingMode::RationaleAspects).unwrap().is_none());

        // sessions
        let s = ChatSession::new(
            "u".into(),
            "mock".into(),
            Some(ImportedContext { question_id: "q1".into(), record_ids: vec![done.id.clone()] }),
        );
        store.insert_session(&s).unwrap();
        let msg = SessionMessage { role: Role::User, content: "hé\n\"quoted\"".into(), timestamp: Utc::now() };
        store.append_messages(&s.id, std::slice::from_ref(&msg)).unwrap();
        let back = store.get_session(&s.id).unwrap().unwrap();
        assert_eq!(back.messages, vec![msg]);
        assert!(store.try_acquire_session(&s.id).unwrap());
        assert!(!store.try_acquire_session(&s.id).unwrap());
        store.release_session(&s.id).unwrap();
        assert!(store.try_acquire_session(&s.id).unwrap());
        assert!(matches!(
            store.append_messages(&"missing".into(), &[]),
            Err(StoreError::NotFound(_))
        ));

        // users
        let u = UserProfile {
            id: "u".into(),
            display_name: "Ada".into(),
            role: UserRole::Researcher,
            credential_hash: "abc".into(),
        };
        store.insert_user(&u).unwrap();
        assert_eq!(store.user_by_credential("abc").unwrap().unwrap(), u);
        assert!(store.user_by_credential("zzz").unwrap().is_none());
        assert_eq!(store.list_users().unwrap().len(), 1);
    }
}
