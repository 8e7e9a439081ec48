use std::path::Path;
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{check_record, check_update, Recovered, Repository, StoreError, StoreResult};
use crate::chat::{ChatSession, SessionMessage};
use crate::engine::{BatchJob, JobState};
use crate::highlight::HighlightResult;
use crate::model::{
    AnnotationEvent, AnswerId, AssessmentRecord, JobId, Question, QuestionId, RecordId,
    RecordStatus, SessionId, StudentAnswer, UserId, UserProfile, UserRole,
};
use crate::prompt::TaggingMode;

const MIGRATIONS: &[&str] = &[include_str!("../../migrations/0001_init.sql")];

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        if let rusqlite::Error::SqliteFailure(f, _) = &e {
            if f.code == rusqlite::ErrorCode::ConstraintViolation {
                return StoreError::Conflict(e.to_string());
            }
        }
        StoreError::Backend(e.to_string())
    }
}

fn to_json<T: Serialize>(v: &T) -> StoreResult<String> {
    serde_json::to_string(v).map_err(|e| StoreError::Backend(e.to_string()))
}

fn from_json<T: DeserializeOwned>(s: &str) -> StoreResult<T> {
    serde_json::from_str(s).map_err(|e| StoreError::Backend(format!("corrupt row: {e}")))
}

fn job_state(s: JobState) -> &'static str {
    match s {
        JobState::Idle => "idle",
        JobState::Running => "running",
        JobState::Finished => "finished",
    }
}

fn role_name(r: UserRole) -> &'static str {
    match r {
        UserRole::Educator => "educator",
        UserRole::Researcher => "researcher",
        UserRole::Admin => "admin",
    }
}

/// SQLite-backed store. Several processes may open the same database file;
/// compare-and-set updates keep record transitions consistent between them.
pub struct SqliteStore {
    conn: Mutex<Connection>,
}

impl SqliteStore {
    pub fn open(path: impl AsRef<Path>) -> StoreResult<Self> {
        Self::init(Connection::open(path)?)
    }

    pub fn open_in_memory() -> StoreResult<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    /// Accepts `sqlite://path`, `sqlite:path` or a bare path.
    pub fn open_url(url: &str) -> StoreResult<Self> {
        let path = url
            .strip_prefix("sqlite://")
            .or_else(|| url.strip_prefix("sqlite:"))
            .unwrap_or(url);
        Self::open(path)
    }

    fn init(mut conn: Connection) -> StoreResult<Self> {
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let version: usize = tx.query_row("PRAGMA user_version", [], |r| r.get(0))?;
        for (i, sql) in MIGRATIONS.iter().enumerate().skip(version) {
            tx.execute_batch(sql)?;
            tx.pragma_update(None, "user_version", i + 1)?;
        }
        tx.commit()?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn bodies<T: DeserializeOwned>(
        &self,
        sql: &str,
        params: impl rusqlite::Params,
    ) -> StoreResult<Vec<T>> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(sql)?;
        let rows = stmt.query_map(params, |r| r.get::<_, String>(0))?;
        rows.map(|b| from_json(&b?)).collect()
    }

    fn body<T: DeserializeOwned>(&self, sql: &str, params: impl rusqlite::Params) -> StoreResult<Option<T>> {
        let conn = self.conn.lock();
        let b: Option<String> = conn.query_row(sql, params, |r| r.get(0)).optional()?;
        b.map(|b| from_json(&b)).transpose()
    }
}

impl Repository for SqliteStore {
    fn insert_question(&self, q: &Question) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO questions (id, body) VALUES (?1, ?2)",
            params![q.id.as_str(), to_json(q)?],
        )?;
        Ok(())
    }

    fn get_question(&self, id: &QuestionId) -> StoreResult<Option<Question>> {
        self.body("SELECT body FROM questions WHERE id = ?1", [id.as_str()])
    }

    fn list_questions(&self) -> StoreResult<Vec<Question>> {
        self.bodies("SELECT body FROM questions ORDER BY seq", [])
    }

    fn insert_answers(&self, answers: &[StudentAnswer]) -> StoreResult<()> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        for a in answers {
            tx.execute(
                "INSERT INTO answers (id, question_id, body) VALUES (?1, ?2, ?3)",
                params![a.id.as_str(), a.question_id.as_str(), to_json(a)?],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    fn get_answer(&self, id: &AnswerId) -> StoreResult<Option<StudentAnswer>> {
        self.body("SELECT body FROM answers WHERE id = ?1", [id.as_str()])
    }

    fn list_answers(&self, question_id: &QuestionId) -> StoreResult<Vec<StudentAnswer>> {
        self.bodies(
            "SELECT body FROM answers WHERE question_id = ?1 ORDER BY seq",
            [question_id.as_str()],
        )
    }

    fn insert_job(&self, job: &BatchJob, records: &[AssessmentRecord]) -> StoreResult<()> {
        for r in records {
            check_record(r)?;
        }
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO jobs (id, question_id, state, body) VALUES (?1, ?2, ?3, ?4)",
            params![job.id.as_str(), job.question_id.as_str(), job_state(job.state), to_json(job)?],
        )?;
        for r in records {
            insert_record_row(&tx, r)?;
        }
        tx.commit()?;
        Ok(())
    }

    fn get_job(&self, id: &JobId) -> StoreResult<Option<BatchJob>> {
        let conn = self.conn.lock();
        let row: Option<(String, String)> = conn
            .query_row("SELECT state, body FROM jobs WHERE id = ?1", [id.as_str()], |r| {
                Ok((r.get(0)?, r.get(1)?))
            })
            .optional()?;
        row.map(|(state, body)| {
            let mut job: BatchJob = from_json(&body)?;
            job.state = [JobState::Idle, JobState::Running, JobState::Finished]
                .into_iter()
                .find(|s| job_state(*s) == state)
                .ok_or_else(|| StoreError::Backend(format!("bad job state {state}")))?;
            Ok(job)
        })
        .transpose()
    }

    fn transition_job(&self, id: &JobId, from: JobState, to: JobState) -> StoreResult<bool> {
        let conn = self.conn.lock();
        let n = conn.execute(
            "UPDATE jobs SET state = ?1 WHERE id = ?2 AND state = ?3",
            params![job_state(to), id.as_str(), job_state(from)],
        )?;
        if n == 0 {
            let exists: Option<i64> = conn
                .query_row("SELECT 1 FROM jobs WHERE id = ?1", [id.as_str()], |r| r.get(0))
                .optional()?;
            if exists.is_none() {
                return Err(StoreError::NotFound(format!("job {id}")));
            }
        }
        Ok(n == 1)
    }

    fn insert_record(&self, record: &AssessmentRecord) -> StoreResult<()> {
        check_record(record)?;
        let conn = self.conn.lock();
        insert_record_row(&conn, record)
    }

    fn get_record(&self, id: &RecordId) -> StoreResult<Option<AssessmentRecord>> {
        self.body("SELECT body FROM records WHERE id = ?1", [id.as_str()])
    }

    fn job_records(&self, job_id: &JobId) -> StoreResult<Vec<AssessmentRecord>> {
        self.bodies("SELECT body FROM records WHERE job_id = ?1 ORDER BY seq", [job_id.as_str()])
    }

    fn answer_records(&self, answer_id: &AnswerId) -> StoreResult<Vec<AssessmentRecord>> {
        self.bodies(
            "SELECT body FROM records WHERE answer_id = ?1 ORDER BY seq",
            [answer_id.as_str()],
        )
    }

    fn question_records(&self, question_id: &QuestionId) -> StoreResult<Vec<AssessmentRecord>> {
        self.bodies(
            "SELECT body FROM records WHERE question_id = ?1 ORDER BY seq",
            [question_id.as_str()],
        )
    }

    fn update_record(&self, expected: RecordStatus, record: &AssessmentRecord) -> StoreResult<bool> {
        let conn = self.conn.lock();
        let current: Option<String> = conn
            .query_row("SELECT status FROM records WHERE id = ?1", [record.id.as_str()], |r| {
                r.get(0)
            })
            .optional()?;
        let current = current
            .as_deref()
            .and_then(RecordStatus::parse)
            .ok_or_else(|| StoreError::NotFound(format!("record {}", record.id)))?;
        if !check_update(current, expected, record)? {
            return Ok(false);
        }
        let n = conn.execute(
            "UPDATE records SET status = ?1, body = ?2 WHERE id = ?3 AND status = ?4",
            params![record.status.as_str(), to_json(record)?, record.id.as_str(), expected.as_str()],
        )?;
        Ok(n == 1)
    }

    fn recover_interrupted(&self) -> StoreResult<Recovered> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let mut out = Recovered::default();
        let running: Vec<String> = {
            let mut stmt = tx.prepare("SELECT body FROM records WHERE status = 'running'")?;
            let rows = stmt.query_map([], |r| r.get(0))?;
            rows.collect::<Result<_, _>>()?
        };
        for body in running {
            let mut r: AssessmentRecord = from_json(&body)?;
            r.status = RecordStatus::Pending;
            tx.execute(
                "UPDATE records SET status = 'pending', body = ?1 WHERE id = ?2",
                params![to_json(&r)?, r.id.as_str()],
            )?;
            out.records += 1;
        }
        {
            let mut stmt = tx.prepare("SELECT id FROM jobs WHERE state = 'running' ORDER BY seq")?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            for id in rows {
                out.jobs.push(JobId(id?));
            }
        }
        tx.execute("UPDATE jobs SET state = 'idle' WHERE state = 'running'", [])?;
        out.sessions = tx.execute("UPDATE chat_sessions SET busy = 0 WHERE busy = 1", [])?;
        tx.commit()?;
        Ok(out)
    }

    fn append_event(&self, event: &AnnotationEvent) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO annotation_events (id, question_id, body) VALUES (?1, ?2, ?3)",
            params![event.id.as_str(), event.question_id.as_str(), to_json(event)?],
        )?;
        Ok(())
    }

    fn question_events(&self, question_id: &QuestionId) -> StoreResult<Vec<AnnotationEvent>> {
        self.bodies(
            "SELECT body FROM annotation_events WHERE question_id = ?1 ORDER BY seq",
            [question_id.as_str()],
        )
    }

    fn put_highlight(&self, result: &HighlightResult) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO highlights (record_id, mode, body) VALUES (?1, ?2, ?3)
             ON CONFLICT (record_id, mode) DO UPDATE SET body = excluded.body",
            params![result.record_id.as_str(), result.mode.as_str(), to_json(result)?],
        )?;
        Ok(())
    }

    fn get_highlight(&self, record_id: &RecordId, mode: TaggingMode) -> StoreResult<Option<HighlightResult>> {
        self.body(
            "SELECT body FROM highlights WHERE record_id = ?1 AND mode = ?2",
            params![record_id.as_str(), mode.as_str()],
        )
    }

    fn insert_session(&self, session: &ChatSession) -> StoreResult<()> {
        let mut header = session.clone();
        header.messages.clear();
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO chat_sessions (id, body) VALUES (?1, ?2)",
            params![session.id.as_str(), to_json(&header)?],
        )?;
        for m in &session.messages {
            tx.execute(
                "INSERT INTO chat_messages (session_id, body) VALUES (?1, ?2)",
                params![session.id.as_str(), to_json(m)?],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    fn get_session(&self, id: &SessionId) -> StoreResult<Option<ChatSession>> {
        let Some(mut s) = self.body::<ChatSession>("SELECT body FROM chat_sessions WHERE id = ?1", [id.as_str()])?
        else {
            return Ok(None);
        };
        s.messages = self.bodies(
            "SELECT body FROM chat_messages WHERE session_id = ?1 ORDER BY seq",
            [id.as_str()],
        )?;
        Ok(Some(s))
    }

    fn append_messages(&self, id: &SessionId, messages: &[SessionMessage]) -> StoreResult<()> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let exists: Option<i64> = tx
            .query_row("SELECT 1 FROM chat_sessions WHERE id = ?1", [id.as_str()], |r| r.get(0))
            .optional()?;
        if exists.is_none() {
            return Err(StoreError::NotFound(format!("session {id}")));
        }
        for m in messages {
            tx.execute(
                "INSERT INTO chat_messages (session_id, body) VALUES (?1, ?2)",
                params![id.as_str(), to_json(m)?],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    fn try_acquire_session(&self, id: &SessionId) -> StoreResult<bool> {
        let conn = self.conn.lock();
        let n = conn.execute(
            "UPDATE chat_sessions SET busy = 1 WHERE id = ?1 AND busy = 0",
            [id.as_str()],
        )?;
        if n == 0 {
            let exists: Option<i64> = conn
                .query_row("SELECT 1 FROM chat_sessions WHERE id = ?1", [id.as_str()], |r| r.get(0))
                .optional()?;
            if exists.is_none() {
                return Err(StoreError::NotFound(format!("session {id}")));
            }
        }
        Ok(n == 1)
    }

    fn release_session(&self, id: &SessionId) -> StoreResult<()> {
        self.conn
            .lock()
            .execute("UPDATE chat_sessions SET busy = 0 WHERE id = ?1", [id.as_str()])?;
        Ok(())
    }

    fn insert_user(&self, user: &UserProfile) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO users (id, display_name, role, credential_hash) VALUES (?1, ?2, ?3, ?4)",
            params![
                user.id.as_str(),
                user.display_name,
                role_name(user.role),
                user.credential_hash
            ],
        )?;
        Ok(())
    }

    fn user_by_credential(&self, credential_hash: &str) -> StoreResult<Option<UserProfile>> {
        let conn = self.conn.lock();
        conn.query_row(
            "SELECT id, display_name, role, credential_hash FROM users WHERE credential_hash = ?1",
            [credential_hash],
            user_row,
        )
        .optional()?
        .transpose()
    }

    fn list_users(&self) -> StoreResult<Vec<UserProfile>> {
        let conn = self.conn.lock();
        let mut stmt =
            conn.prepare("SELECT id, display_name, role, credential_hash FROM users ORDER BY seq")?;
        let rows = stmt.query_map([], user_row)?;
        rows.map(|r| r?).collect()
    }
}

fn insert_record_row(conn: &Connection, r: &AssessmentRecord) -> StoreResult<()> {
    conn.execute(
        "INSERT INTO records (id, job_id, question_id, answer_id, status, body)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![
            r.id.as_str(),
            r.job_id.as_ref().map(JobId::as_str),
            r.question_id.as_str(),
            r.answer_id.as_str(),
            r.status.as_str(),
            to_json(r)?
        ],
    )?;
    Ok(())
}

fn user_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<StoreResult<UserProfile>> {
    let role: String = r.get(2)?;
    let role = match role.as_str() {
        "educator" => UserRole::Educator,
        "researcher" => UserRole::Researcher,
        "admin" => UserRole::Admin,
        other => return Ok(Err(StoreError::Backend(format!("bad role {other}")))),
    };
    Ok(Ok(UserProfile {
        id: UserId(r.get(0)?),
        display_name: r.get(1)?,
        role,
        credential_hash: r.get(3)?,
    }))
}
