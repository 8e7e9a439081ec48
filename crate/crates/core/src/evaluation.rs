//! Metrics reports over stored batch results and effective gold marks.
//!
//! For each answer the latest completed batch record of the provider is
//! used. Chat-regenerated and human-authored records are never scored.
//! Answers the provider was run on but that have no completed record or no
//! gold mark are counted in `n_excluded`.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::annotation::effective_gold_marks;
use crate::metrics::{LabeledPairSet, MetricsError, MetricsReport};
use crate::model::{AnswerId, AssessmentRecord, ProviderId, QuestionId, RecordOrigin, RecordStatus};
use crate::store::{Repository, StoreError};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("question {0} not found")]
    QuestionNotFound(QuestionId),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EvaluationError {
    pub fn code(&self) -> &'static str {
        match self {
            EvaluationError::QuestionNotFound(_) => "question_not_found",
            EvaluationError::Metrics(e) => e.code(),
            EvaluationError::Store(e) => e.code(),
        }
    }
}

struct Inputs {
    max_mark: u32,
    gold: HashMap<AnswerId, Option<u32>>,
    records: Vec<AssessmentRecord>,
}

fn load(store: &dyn Repository, question_id: &QuestionId) -> Result<Inputs, EvaluationError> {
    let q = store
        .get_question(question_id)?
        .ok_or_else(|| EvaluationError::QuestionNotFound(question_id.clone()))?;
    let answers = store.list_answers(question_id)?;
    let events = store.question_events(question_id)?;
    let records = store
        .question_records(question_id)?
        .into_iter()
        .filter(|r| r.origin == RecordOrigin::Batch)
        .collect();
    Ok(Inputs {
        max_mark: q.max_mark,
        gold: effective_gold_marks(&answers, &events),
        records,
    })
}

fn report_from(inputs: &Inputs, provider: &ProviderId) -> Result<MetricsReport, EvaluationError> {
    // answer -> latest completed mark (None if the provider ran but never completed)
    let mut latest: Vec<(AnswerId, Option<u32>)> = Vec::new();
    let mut index: HashMap<AnswerId, usize> = HashMap::new();
    for r in inputs.records.iter().filter(|r| &r.provider_id == provider) {
        let slot = *index.entry(r.answer_id.clone()).or_insert_with(|| {
            latest.push((r.answer_id.clone(), None));
            latest.len() - 1
        });
        if r.status == RecordStatus::Completed {
            latest[slot].1 = r.mark;
        }
    }
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (answer, mark) in &latest {
        match (inputs.gold.get(answer).copied().flatten(), mark) {
            (Some(g), Some(m)) => pairs.push((g, *m)),
            _ => excluded += 1,
        }
    }
    let set = LabeledPairSet::new(pairs, inputs.max_mark as usize + 1)?;
    Ok(MetricsReport::compute(provider.clone(), &set, excluded)?)
}

pub fn build_report(
    store: &dyn Repository,
    question_id: &QuestionId,
    provider: &ProviderId,
) -> Result<MetricsReport, EvaluationError> {
    report_from(&load(store, question_id)?, provider)
}

/// One report per provider with at least one evaluable record, ordered by
/// provider id. Fails with `no_evaluable_records` if there are none at all.
pub fn build_reports(
    store: &dyn Repository,
    question_id: &QuestionId,
) -> Result<Vec<MetricsReport>, EvaluationError> {
    let inputs = load(store, question_id)?;
    let providers: BTreeSet<&ProviderId> = inputs.records.iter().map(|r| &r.provider_id).collect();
    let mut out = Vec::new();
    for p in providers {
        match report_from(&inputs, p) {
            Ok(r) => out.push(r),
            Err(EvaluationError::Metrics(MetricsError::NoEvaluableRecords)) => {}
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(MetricsError::NoEvaluableRecords.into());
    }
    Ok(out)
}
