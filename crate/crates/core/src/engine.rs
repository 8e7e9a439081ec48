//! Bulk assessment: question and answer ingestion, batch job creation, and
//! concurrent execution of (answer × provider) records.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{
    validate_answer_batch, validate_question, AnswerId, AnswerViolation, AssessmentRecord, JobId,
    ProviderId, Question, QuestionId, QuestionViolation, RecordOrigin, RecordStatus,
    StudentAnswer,
};
use crate::parse::parse_model_output;
use crate::prompt::PromptCompiler;
use crate::store::{Repository, StoreError};

pub const DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Idle,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchJob {
    pub id: JobId,
    pub question_id: QuestionId,
    pub answer_ids: Vec<AnswerId>,
    pub provider_ids: Vec<ProviderId>,
    pub origin: RecordOrigin,
    /// Appended to every assessment prompt of the job (chat regeneration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_suffix: Option<String>,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
}

impl BatchJob {
    pub fn new(
        question_id: QuestionId,
        answer_ids: Vec<AnswerId>,
        provider_ids: Vec<ProviderId>,
        origin: RecordOrigin,
        prompt_suffix: Option<String>,
    ) -> Self {
        Self {
            id: JobId::generate(),
            question_id,
            answer_ids,
            provider_ids,
            origin,
            prompt_suffix,
            state: JobState::Idle,
            created_at: Utc::now(),
        }
    }

    /// One pending record per (answer, provider), answer-major.
    pub fn pending_records(&self) -> Vec<AssessmentRecord> {
        self.answer_ids
            .iter()
            .flat_map(|a| {
                self.provider_ids.iter().map(move |p| {
                    AssessmentRecord::pending(
                        Some(self.id.clone()),
                        self.question_id.clone(),
                        a.clone(),
                        p.clone(),
                        self.origin,
                    )
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: usize,
    pub running: usize,
    pub completed: usize,
    pub parse_failed: usize,
    pub provider_failed: usize,
}

impl StatusCounts {
    pub fn tally<'a>(records: impl IntoIterator<Item = &'a AssessmentRecord>) -> Self {
        let mut c = Self::default();
        for r in records {
            *match r.status {
                RecordStatus::Pending => &mut c.pending,
                RecordStatus::Running => &mut c.running,
                RecordStatus::Completed => &mut c.completed,
                RecordStatus::ParseFailed => &mut c.parse_failed,
                RecordStatus::ProviderFailed => &mut c.provider_failed,
            } += 1;
        }
        c
    }

    pub fn total(&self) -> usize {
        self.pending + self.running + self.completed + self.parse_failed + self.provider_failed
    }
}

/// Snapshot of a job and its records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStatus {
    pub job: BatchJob,
    pub counts: StatusCounts,
    /// True when every record is terminal.
    pub terminal: bool,
    pub records: Vec<AssessmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("question {0} not found")]
    QuestionNotFound(QuestionId),
    #[error("answer {0} not found")]
    AnswerNotFound(AnswerId),
    #[error("job {0} not found")]
    JobNotFound(JobId),
    #[error("batch has no answers or no providers")]
    EmptyBatch,
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("job {0} is already running")]
    JobAlreadyRunning(JobId),
    #[error("invalid question: {0:?}")]
    InvalidQuestion(Vec<QuestionViolation>),
    #[error("invalid answers: {0:?}")]
    InvalidAnswers(Vec<AnswerViolation>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::QuestionNotFound(_) => "question_not_found",
            EngineError::AnswerNotFound(_) => "answer_not_found",
            EngineError::JobNotFound(_) => "job_not_found",
            EngineError::EmptyBatch => "empty_batch",
            EngineError::UnknownProvider(_) => "unknown_provider",
            EngineError::JobAlreadyRunning(_) => "job_already_running",
            EngineError::InvalidQuestion(_) => "invalid_question",
            EngineError::InvalidAnswers(_) => "invalid_answers",
            EngineError::Store(e) => e.code(),
        }
    }
}

enum Claim {
    Claimed(BatchJob),
    Finished,
}

pub struct AssessmentEngine {
    store: Arc<dyn Repository>,
    gateway: Arc<Gateway>,
    prompts: Arc<PromptCompiler>,
    workers: usize,
}

impl AssessmentEngine {
    pub fn new(store: Arc<dyn Repository>, gateway: Arc<Gateway>, prompts: Arc<PromptCompiler>) -> Self {
        Self {
            store,
            gateway,
            prompts,
            workers: DEFAULT_WORKERS,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn store(&self) -> &Arc<dyn Repository> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn prompts(&self) -> &Arc<PromptCompiler> {
        &self.prompts
    }

    pub fn create_question(&self, q: &Question) -> Result<(), EngineError> {
        let violations = validate_question(q);
        if !violations.is_empty() {
            return Err(EngineError::InvalidQuestion(violations));
        }
        self.store.insert_question(q)?;
        Ok(())
    }

    pub fn question(&self, id: &QuestionId) -> Result<Question, EngineError> {
        self.store
            .get_question(id)?
            .ok_or_else(|| EngineError::QuestionNotFound(id.clone()))
    }

    /// Validates and stores an upload. Nothing is stored if any answer is
    /// invalid.
    pub fn add_answers(&self, question_id: &QuestionId, answers: &[StudentAnswer]) -> Result<(), EngineError> {
        let q = self.question(question_id)?;
        let violations = validate_answer_batch(&q, answers);
        if !violations.is_empty() {
            return Err(EngineError::InvalidAnswers(violations));
        }
        self.store.insert_answers(answers)?;
        Ok(())
    }

    /// Creates a job over `answer_ids` (all answers of the question when
    /// `None`). Nothing is persisted unless every check passes.
    pub fn create_batch(
        &self,
        question_id: &QuestionId,
        answer_ids: Option<&[AnswerId]>,
        providers: &[ProviderId],
    ) -> Result<BatchJob, EngineError> {
        self.question(question_id)?;
        let answer_ids: Vec<AnswerId> = match answer_ids {
            Some(ids) => {
                for id in ids {
                    match self.store.get_answer(id)? {
                        Some(a) if &a.question_id == question_id => {}
                        _ => return Err(EngineError::AnswerNotFound(id.clone())),
                    }
                }
                dedup(ids)
            }
            None => self
                .store
                .list_answers(question_id)?
                .into_iter()
                .map(|a| a.id)
                .collect(),
        };
        let providers = dedup(providers);
        if answer_ids.is_empty() || providers.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        if let Some(p) = providers.iter().find(|p| !self.gateway.contains(p)) {
            return Err(EngineError::UnknownProvider(p.to_string()));
        }
        let job = BatchJob::new(question_id.clone(), answer_ids, providers, RecordOrigin::Batch, None);
        self.store.insert_job(&job, &job.pending_records())?;
        Ok(job)
    }

    pub fn get_batch_status(&self, job_id: &JobId) -> Result<BatchStatus, EngineError> {
        let job = self
            .store
            .get_job(job_id)?
            .ok_or_else(|| EngineError::JobNotFound(job_id.clone()))?;
        let records = self.store.job_records(job_id)?;
        let counts = StatusCounts::tally(&records);
        Ok(BatchStatus {
            terminal: records.iter().all(|r| r.status.is_terminal()),
            job,
            counts,
            records,
        })
    }

    fn claim(&self, job_id: &JobId) -> Result<Claim, EngineError> {
        let job = self
            .store
            .get_job(job_id)?
            .ok_or_else(|| EngineError::JobNotFound(job_id.clone()))?;
        if job.state == JobState::Idle && self.store.transition_job(job_id, JobState::Idle, JobState::Running)? {
            return Ok(Claim::Claimed(job));
        }
        match self.store.get_job(job_id)?.map(|j| j.state) {
            Some(JobState::Finished) => Ok(Claim::Finished),
            _ => Err(EngineError::JobAlreadyRunning(job_id.clone())),
        }
    }

    /// Runs a job to completion. A finished job is returned unchanged; a job
    /// that is currently running is a conflict.
    pub async fn run_batch(&self, job_id: &JobId) -> Result<BatchStatus, EngineError> {
        if let Claim::Claimed(job) = self.claim(job_id)? {
            self.execute(&job).await?;
        }
        self.get_batch_status(job_id)
    }

    /// Claims the job and executes it on a background task. Returns the
    /// status as of the claim.
    pub fn start_batch(self: &Arc<Self>, job_id: &JobId) -> Result<BatchStatus, EngineError> {
        if let Claim::Claimed(job) = self.claim(job_id)? {
            let engine = Arc::clone(self);
            tokio::spawn(async move {
                if let Err(e) = engine.execute(&job).await {
                    tracing::error!(job = %job.id, error = %e, "batch execution failed");
                }
            });
        }
        self.get_batch_status(job_id)
    }

    /// Re-executes jobs released by crash recovery.
    pub fn resume(self: &Arc<Self>, jobs: &[JobId]) {
        for id in jobs {
            if let Err(e) = self.start_batch(id) {
                tracing::warn!(job = %id, error = %e, "could not resume job");
            }
        }
    }

    async fn execute(&self, job: &BatchJob) -> Result<(), EngineError> {
        let q = self.question(&job.question_id)?;
        let mut answers = HashMap::new();
        for id in &job.answer_ids {
            let a = self
                .store
                .get_answer(id)?
                .ok_or_else(|| EngineError::AnswerNotFound(id.clone()))?;
            answers.insert(id.clone(), a);
        }
        let pending: Vec<_> = self
            .store
            .job_records(&job.id)?
            .into_iter()
            .filter(|r| r.status == RecordStatus::Pending)
            .collect();
        futures::stream::iter(pending)
            .for_each_concurrent(self.workers, |record| {
                let answer = &answers[&record.answer_id];
                let q = &q;
                async move {
                    if let Err(e) = self.process(q, answer, record, job.prompt_suffix.as_deref()).await {
                        tracing::error!(job = %job.id, error = %e, "record update failed");
                    }
                }
            })
            .await;
        self.store.transition_job(&job.id, JobState::Running, JobState::Finished)?;
        Ok(())
    }

    async fn process(
        &self,
        q: &Question,
        answer: &StudentAnswer,
        mut record: AssessmentRecord,
        suffix: Option<&str>,
    ) -> Result<(), StoreError> {
        record.status = RecordStatus::Running;
        if !self.store.update_record(RecordStatus::Pending, &record)? {
            return Ok(());
        }
        let mut prompt = self.prompts.compile_assessment_prompt(q, answer);
        if let Some(s) = suffix {
            prompt.push_str(s);
        }
        let outcome = self.gateway.generate(&record.provider_id, &prompt).await;
        apply_outcome(&mut record, outcome, q.max_mark);
        record.finished_at = Some(Utc::now());
        self.store.update_record(RecordStatus::Running, &record)?;
        Ok(())
    }

    /// Creates and runs a one-record job; used by chat regeneration.
    pub async fn run_single(
        &self,
        question_id: &QuestionId,
        answer_id: &AnswerId,
        provider: &ProviderId,
        origin: RecordOrigin,
        prompt_suffix: Option<String>,
    ) -> Result<AssessmentRecord, EngineError> {
        if !self.gateway.contains(provider) {
            return Err(EngineError::UnknownProvider(provider.to_string()));
        }
        let job = BatchJob::new(
            question_id.clone(),
            vec![answer_id.clone()],
            vec![provider.clone()],
            origin,
            prompt_suffix,
        );
        self.store.insert_job(&job, &job.pending_records())?;
        let status = self.run_batch(&job.id).await?;
        Ok(status.records.into_iter().next().expect("one record per single job"))
    }
}

fn apply_outcome(
    record: &mut AssessmentRecord,
    outcome: Result<crate::gateway::Completion, GatewayError>,
    max_mark: crate::model::Mark,
) {
    match outcome {
        Ok(c) => {
            match parse_model_output(&c.text, max_mark) {
                Ok(p) => {
                    record.status = RecordStatus::Completed;
                    record.mark = Some(p.mark);
                    record.rationale = Some(p.rationale);
                }
                Err(f) => {
                    record.status = RecordStatus::ParseFailed;
                    record.failure = Some(f.code().to_owned());
                }
            }
            record.raw_output = Some(c.text);
        }
        Err(e) => {
            record.status = RecordStatus::ProviderFailed;
            record.failure = Some(e.to_string());
        }
    }
}

fn dedup<T: Ord + Clone>(items: &[T]) -> Vec<T> {
    let mut seen = BTreeSet::new();
    items.iter().filter(|i| seen.insert((*i).clone())).cloned().collect()
}
