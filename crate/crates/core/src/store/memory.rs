use std::collections::{HashMap, HashSet};

use parking_lot::Mutex;

use super::{check_record, check_update, Recovered, Repository, StoreError, StoreResult};
use crate::chat::{ChatSession, SessionMessage};
use crate::engine::{BatchJob, JobState};
use crate::highlight::HighlightResult;
use crate::model::{
    AnnotationEvent, AnswerId, AssessmentRecord, JobId, Question, QuestionId, RecordId,
    RecordStatus, SessionId, StudentAnswer, UserProfile,
};
use crate::prompt::TaggingMode;

/// Insertion-ordered table with an id index.
#[derive(Debug)]
struct Table<K, V> {
    rows: Vec<V>,
    index: HashMap<K, usize>,
}

impl<K, V> Default for Table<K, V> {
    fn default() -> Self {
        Self {
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<K: std::hash::Hash + Eq + Clone + std::fmt::Display, V> Table<K, V> {
    fn insert(&mut self, key: K, row: V) -> StoreResult<()> {
        if self.index.contains_key(&key) {
            return Err(StoreError::Conflict(key.to_string()));
        }
        self.index.insert(key, self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    fn get(&self, key: &K) -> Option<&V> {
        self.index.get(key).map(|&i| &self.rows[i])
    }

    fn get_mut(&mut self, key: &K) -> Option<&mut V> {
        self.index.get(key).map(|&i| &mut self.rows[i])
    }
}

#[derive(Default)]
struct Inner {
    questions: Table<QuestionId, Question>,
    answers: Table<AnswerId, StudentAnswer>,
    jobs: Table<JobId, BatchJob>,
    records: Table<RecordId, AssessmentRecord>,
    events: Vec<AnnotationEvent>,
    highlights: HashMap<(RecordId, TaggingMode), HighlightResult>,
    sessions: Table<SessionId, ChatSession>,
    busy: HashSet<SessionId>,
    users: Vec<UserProfile>,
}

/// Process-local store. Share it behind an `Arc` to let several services
/// (or several server instances in one process) see the same data.
#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<Inner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Repository for MemoryStore {
    fn insert_question(&self, q: &Question) -> StoreResult<()> {
        self.inner.lock().questions.insert(q.id.clone(), q.clone())
    }

    fn get_question(&self, id: &QuestionId) -> StoreResult<Option<Question>> {
        Ok(self.inner.lock().questions.get(id).cloned())
    }

    fn list_questions(&self) -> StoreResult<Vec<Question>> {
        Ok(self.inner.lock().questions.rows.clone())
    }

    fn insert_answers(&self, answers: &[StudentAnswer]) -> StoreResult<()> {
        let mut inner = self.inner.lock();
        let mut fresh = HashSet::new();
        for a in answers {
            if inner.answers.get(&a.id).is_some() || !fresh.insert(&a.id) {
                return Err(StoreError::Conflict(format!("answer {}", a.id)));
            }
        }
        for a in answers {
            inner.answers.insert(a.id.clone(), a.clone())?;
        }
        Ok(())
    }

    fn get_answer(&self, id: &AnswerId) -> StoreResult<Option<StudentAnswer>> {
        Ok(self.inner.lock().answers.get(id).cloned())
    }

    fn list_answers(&self, question_id: &QuestionId) -> StoreResult<Vec<StudentAnswer>> {
        Ok(self
            .inner
            .lock()
            .answers
            .rows
            .iter()
            .filter(|a| &a.question_id == question_id)
            .cloned()
            .collect())
    }

    fn insert_job(&self, job: &BatchJob, records: &[AssessmentRecord]) -> StoreResult<()> {
        let mut inner = self.inner.lock();
        if inner.jobs.get(&job.id).is_some() {
            return Err(StoreError::Conflict(format!("job {}", job.id)));
        }
        for r in records {
            check_record(r)?;
            if inner.records.get(&r.id).is_some() {
                return Err(StoreError::Conflict(format!("record {}", r.id)));
            }
        }
        inner.jobs.insert(job.id.clone(), job.clone())?;
        for r in records {
            inner.records.insert(r.id.clone(), r.clone())?;
        }
        Ok(())
    }

    fn get_job(&self, id: &JobId) -> StoreResult<Option<BatchJob>> {
        Ok(self.inner.lock().jobs.get(id).cloned())
    }

    fn transition_job(&self, id: &JobId, from: JobState, to: JobState) -> StoreResult<bool> {
        let mut inner = self.inner.lock();
        let job = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(format!("job {id}")))?;
        if job.state != from {
            return Ok(false);
        }
        job.state = to;
        Ok(true)
    }

    fn insert_record(&self, record: &AssessmentRecord) -> StoreResult<()> {
        check_record(record)?;
        self.inner.lock().records.insert(record.id.clone(), record.clone())
    }

    fn get_record(&self, id: &RecordId) -> StoreResult<Option<AssessmentRecord>> {
        Ok(self.inner.lock().records.get(id).cloned())
    }

    fn job_records(&self, job_id: &JobId) -> StoreResult<Vec<AssessmentRecord>> {
        Ok(self
            .inner
            .lock()
            .records
            .rows
            .iter()
            .filter(|r| r.job_id.as_ref() == Some(job_id))
            .cloned()
            .collect())
    }

    fn answer_records(&self, answer_id: &AnswerId) -> StoreResult<Vec<AssessmentRecord>> {
        Ok(self
            .inner
            .lock()
            .records
            .rows
            .iter()
            .filter(|r| &r.answer_id == answer_id)
            .cloned()
            .collect())
    }

    fn question_records(&self, question_id: &QuestionId) -> StoreResult<Vec<AssessmentRecord>> {
        Ok(self
            .inner
            .lock()
            .records
            .rows
            .iter()
            .filter(|r| &r.question_id == question_id)
            .cloned()
            .collect())
    }

    fn update_record(&self, expected: RecordStatus, record: &AssessmentRecord) -> StoreResult<bool> {
        let mut inner = self.inner.lock();
        let slot = inner
            .records
            .get_mut(&record.id)
            .ok_or_else(|| StoreError::NotFound(format!("record {}", record.id)))?;
        let swap = check_update(slot.status, expected, record)?;
        if swap {
            *slot = record.clone();
        }
        Ok(swap)
    }

    fn recover_interrupted(&self) -> StoreResult<Recovered> {
        let mut inner = self.inner.lock();
        let mut out = Recovered::default();
        for r in inner.records.rows.iter_mut() {
            if r.status == RecordStatus::Running {
                r.status = RecordStatus::Pending;
                out.records += 1;
            }
        }
        for j in inner.jobs.rows.iter_mut() {
            if j.state == JobState::Running {
                j.state = JobState::Idle;
                out.jobs.push(j.id.clone());
            }
        }
        out.sessions = inner.busy.len();
        inner.busy.clear();
        Ok(out)
    }

    fn append_event(&self, event: &AnnotationEvent) -> StoreResult<()> {
        self.inner.lock().events.push(event.clone());
        Ok(())
    }

    fn question_events(&self, question_id: &QuestionId) -> StoreResult<Vec<AnnotationEvent>> {
        Ok(self
            .inner
            .lock()
            .events
            .iter()
            .filter(|e| &e.question_id == question_id)
            .cloned()
            .collect())
    }

    fn put_highlight(&self, result: &HighlightResult) -> StoreResult<()> {
        self.inner
            .lock()
            .highlights
            .insert((result.record_id.clone(), result.mode), result.clone());
        Ok(())
    }

    fn get_highlight(&self, record_id: &RecordId, mode: TaggingMode) -> StoreResult<Option<HighlightResult>> {
        Ok(self
            .inner
            .lock()
            .highlights
            .get(&(record_id.clone(), mode))
            .cloned())
    }

    fn insert_session(&self, session: &ChatSession) -> StoreResult<()> {
        self.inner
            .lock()
            .sessions
            .insert(session.id.clone(), session.clone())
    }

    fn get_session(&self, id: &SessionId) -> StoreResult<Option<ChatSession>> {
        Ok(self.inner.lock().sessions.get(id).cloned())
    }

    fn append_messages(&self, id: &SessionId, messages: &[SessionMessage]) -> StoreResult<()> {
        let mut inner = self.inner.lock();
        let s = inner
            .sessions
            .get_mut(id)
            .ok_or_else(|| StoreError::NotFound(format!("session {id}")))?;
        s.messages.extend_from_slice(messages);
        Ok(())
    }

    fn try_acquire_session(&self, id: &SessionId) -> StoreResult<bool> {
        let mut inner = self.inner.lock();
        if inner.sessions.get(id).is_none() {
            return Err(StoreError::NotFound(format!("session {id}")));
        }
        Ok(inner.busy.insert(id.clone()))
    }

    fn release_session(&self, id: &SessionId) -> StoreResult<()> {
        self.inner.lock().busy.remove(id);
        Ok(())
    }

    fn insert_user(&self, user: &UserProfile) -> StoreResult<()> {
        let mut inner = self.inner.lock();
        if inner
            .users
            .iter()
            .any(|u| u.id == user.id || u.credential_hash == user.credential_hash)
        {
            return Err(StoreError::Conflict(format!("user {}", user.id)));
        }
        inner.users.push(user.clone());
        Ok(())
    }

    fn user_by_credential(&self, credential_hash: &str) -> StoreResult<Option<UserProfile>> {
        Ok(self
            .inner
            .lock()
            .users
            .iter()
            .find(|u| u.credential_hash == credential_hash)
            .cloned())
    }

    fn list_users(&self) -> StoreResult<Vec<UserProfile>> {
        Ok(self.inner.lock().users.clone())
    }
}
