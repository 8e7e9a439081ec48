//! Human annotation: gold-label corrections, per-rationale preference flags
//! and human-authored rationales, plus the preference and SFT dataset
//! exports derived from them.
//!
//! The event log is append-only. Effective state (current gold mark, current
//! flag per annotator and record) is always recomputed from the log, so the
//! full history stays available.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnnotationEvent, AnnotationPayload, AnswerId, AssessmentRecord, EventId, Mark,
    PreferenceFlag, ProviderId, Question, QuestionId, RecordId, RecordOrigin, RecordStatus,
    StudentAnswer, UserId, HUMAN_PROVIDER,
};
use crate::prompt::PromptCompiler;
use crate::store::{Repository, StoreError};

pub const PREFERENCE_SCHEMA: &str = "pref-v1";
pub const SFT_SCHEMA: &str = "sft-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("answer {0} not found")]
    AnswerNotFound(AnswerId),
    #[error("record {0} not found")]
    RecordNotFound(RecordId),
    #[error("record {0} is not completed")]
    RecordNotCompleted(RecordId),
    #[error("question {0} not found")]
    QuestionNotFound(QuestionId),
    #[error("mark {mark} outside 0..={max_mark}")]
    OutOfRange { mark: i64, max_mark: Mark },
    #[error("rationale text is empty")]
    EmptyRationale,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AnnotationError {
    pub fn code(&self) -> &'static str {
        match self {
            AnnotationError::AnswerNotFound(_) => "answer_not_found",
            AnnotationError::RecordNotFound(_) => "record_not_found",
            AnnotationError::RecordNotCompleted(_) => "record_not_completed",
            AnnotationError::QuestionNotFound(_) => "question_not_found",
            AnnotationError::OutOfRange { .. } => "out_of_range",
            AnnotationError::EmptyRationale => "empty_rationale",
            AnnotationError::Store(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRef {
    pub record_id: RecordId,
    pub provider: ProviderId,
    pub mark: Mark,
    pub rationale: String,
}

/// One line of the preference export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub schema: String,
    pub question_id: QuestionId,
    pub answer_id: AnswerId,
    pub prompt: String,
    pub chosen: RationaleRef,
    pub rejected: RationaleRef,
    pub annotator: UserId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftSource {
    Human,
    PreferredModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftCompletion {
    pub mark: Mark,
    pub rationale: String,
}

/// One line of the supervised fine-tuning export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub schema: String,
    pub answer_id: AnswerId,
    pub prompt: String,
    pub mark: Mark,
    pub rationale: String,
    pub completion: SftCompletion,
    pub source: SftSource,
}

/// Serializes rows as JSONL, one object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("export rows serialize"));
        out.push('\n');
    }
    out
}

/// Effective gold mark per answer: the latest correction, falling back to
/// the uploaded mark.
pub fn effective_gold_marks(
    answers: &[StudentAnswer],
    events: &[AnnotationEvent],
) -> HashMap<AnswerId, Option<Mark>> {
    let mut gold: HashMap<AnswerId, Option<Mark>> = answers
        .iter()
        .map(|a| (a.id.clone(), a.gold_mark.and_then(|g| Mark::try_from(g).ok())))
        .collect();
    for e in events {
        if let AnnotationPayload::GoldCorrection { answer_id, mark } = &e.payload {
            gold.insert(answer_id.clone(), Some(*mark));
        }
    }
    gold
}

/// Latest flag per (annotator, record); later events supersede earlier ones.
pub fn effective_preferences(events: &[AnnotationEvent]) -> BTreeMap<(UserId, RecordId), PreferenceFlag> {
    let mut flags = BTreeMap::new();
    for e in events {
        if let AnnotationPayload::Preference { record_id, flag } = &e.payload {
            flags.insert((e.author.clone(), record_id.clone()), *flag);
        }
    }
    flags
}

pub struct Annotations {
    store: Arc<dyn Repository>,
    prompts: Arc<PromptCompiler>,
}

impl Annotations {
    pub fn new(store: Arc<dyn Repository>, prompts: Arc<PromptCompiler>) -> Self {
        Self { store, prompts }
    }

    fn answer_and_question(&self, id: &AnswerId) -> Result<(StudentAnswer, Question), AnnotationError> {
        let a = self
            .store
            .get_answer(id)?
            .ok_or_else(|| AnnotationError::AnswerNotFound(id.clone()))?;
        let q = self.question(&a.question_id)?;
        Ok((a, q))
    }

    fn question(&self, id: &QuestionId) -> Result<Question, AnnotationError> {
        self.store
            .get_question(id)?
            .ok_or_else(|| AnnotationError::QuestionNotFound(id.clone()))
    }

    fn append(&self, question_id: QuestionId, author: &UserId, payload: AnnotationPayload) -> Result<AnnotationEvent, AnnotationError> {
        let event = AnnotationEvent {
            id: EventId::generate(),
            question_id,
            author: author.clone(),
            timestamp: Utc::now(),
            payload,
        };
        self.store.append_event(&event)?;
        Ok(event)
    }

    pub fn correct_gold_label(&self, answer_id: &AnswerId, mark: i64, user: &UserId) -> Result<AnnotationEvent, AnnotationError> {
        let (a, q) = self.answer_and_question(answer_id)?;
        let mark = in_range(&q, mark)?;
        self.append(
            q.id,
            user,
            AnnotationPayload::GoldCorrection { answer_id: a.id, mark },
        )
    }

    pub fn effective_gold(&self, answer_id: &AnswerId) -> Result<Option<Mark>, AnnotationError> {
        let (a, q) = self.answer_and_question(answer_id)?;
        let events = self.store.question_events(&q.id)?;
        Ok(effective_gold_marks(std::slice::from_ref(&a), &events)
            .remove(answer_id)
            .flatten())
    }

    pub fn set_preference(&self, record_id: &RecordId, flag: PreferenceFlag, user: &UserId) -> Result<AnnotationEvent, AnnotationError> {
        let r = self
            .store
            .get_record(record_id)?
            .ok_or_else(|| AnnotationError::RecordNotFound(record_id.clone()))?;
        if r.status != RecordStatus::Completed {
            return Err(AnnotationError::RecordNotCompleted(record_id.clone()));
        }
        self.append(
            r.question_id,
            user,
            AnnotationPayload::Preference { record_id: r.id, flag },
        )
    }

    /// The user's current flag on a record, if any.
    pub fn preference(&self, record_id: &RecordId, user: &UserId) -> Result<Option<PreferenceFlag>, AnnotationError> {
        let r = self
            .store
            .get_record(record_id)?
            .ok_or_else(|| AnnotationError::RecordNotFound(record_id.clone()))?;
        let events = self.store.question_events(&r.question_id)?;
        Ok(effective_preferences(&events).remove(&(user.clone(), record_id.clone())))
    }

    /// Stores a human-authored rationale as a completed record with provider
    /// `human`, and logs the authoring event.
    pub fn submit_rationale(
        &self,
        answer_id: &AnswerId,
        mark: i64,
        rationale: &str,
        user: &UserId,
    ) -> Result<(AnnotationEvent, AssessmentRecord), AnnotationError> {
        let (a, q) = self.answer_and_question(answer_id)?;
        let mark = in_range(&q, mark)?;
        if rationale.trim().is_empty() {
            return Err(AnnotationError::EmptyRationale);
        }
        let mut record = AssessmentRecord::pending(
            None,
            q.id.clone(),
            a.id.clone(),
            HUMAN_PROVIDER.into(),
            RecordOrigin::Human,
        );
        record.status = RecordStatus::Completed;
        record.mark = Some(mark);
        record.rationale = Some(rationale.to_owned());
        record.finished_at = Some(record.created_at);
        self.store.insert_record(&record)?;
        let event = self.append(
            q.id,
            user,
            AnnotationPayload::AuthoredRationale {
                answer_id: a.id,
                record_id: record.id.clone(),
                mark,
                rationale: rationale.to_owned(),
            },
        )?;
        Ok((event, record))
    }

    /// For every (answer, annotator), each record flagged preferred is paired
    /// with each record flagged not preferred. Ordered by answer id, chosen
    /// provider, rejected provider, then annotator and record ids.
    pub fn export_preference_pairs(&self, question_id: &QuestionId) -> Result<Vec<PreferencePair>, AnnotationError> {
        let q = self.question(question_id)?;
        let events = self.store.question_events(question_id)?;
        let records: HashMap<RecordId, AssessmentRecord> = self
            .store
            .question_records(question_id)?
            .into_iter()
            .map(|r| (r.id.clone(), r))
            .collect();

        type Group = (Vec<RationaleRef>, Vec<RationaleRef>);
        let mut groups: BTreeMap<(AnswerId, UserId), Group> = BTreeMap::new();
        for ((user, record_id), flag) in effective_preferences(&events) {
            let Some(r) = records.get(&record_id) else { continue };
            let (Some(mark), Some(rationale)) = (r.mark, r.rationale.clone()) else { continue };
            let entry = groups.entry((r.answer_id.clone(), user)).or_default();
            let rr = RationaleRef {
                record_id,
                provider: r.provider_id.clone(),
                mark,
                rationale,
            };
            match flag {
                PreferenceFlag::Preferred => entry.0.push(rr),
                PreferenceFlag::NotPreferred => entry.1.push(rr),
            }
        }

        let mut prompts: HashMap<AnswerId, String> = HashMap::new();
        let mut pairs = Vec::new();
        for ((answer_id, annotator), (chosen, rejected)) in groups {
            if chosen.is_empty() || rejected.is_empty() {
                continue;
            }
            let prompt = match prompts.get(&answer_id) {
                Some(p) => p.clone(),
                None => {
                    let a = self
                        .store
                        .get_answer(&answer_id)?
                        .ok_or_else(|| AnnotationError::AnswerNotFound(answer_id.clone()))?;
                    let p = self.prompts.compile_assessment_prompt(&q, &a);
                    prompts.insert(answer_id.clone(), p.clone());
                    p
                }
            };
            for c in &chosen {
                for r in &rejected {
                    pairs.push(PreferencePair {
                        schema: PREFERENCE_SCHEMA.into(),
                        question_id: q.id.clone(),
                        answer_id: answer_id.clone(),
                        prompt: prompt.clone(),
                        chosen: c.clone(),
                        rejected: r.clone(),
                        annotator: annotator.clone(),
                    });
                }
            }
        }
        pairs.sort_by(|a, b| {
            (&a.answer_id, &a.chosen.provider, &a.rejected.provider, &a.annotator, &a.chosen.record_id, &a.rejected.record_id)
                .cmp(&(&b.answer_id, &b.chosen.provider, &b.rejected.provider, &b.annotator, &b.chosen.record_id, &b.rejected.record_id))
        });
        Ok(pairs)
    }

    /// Human-authored rationales (one line per authoring event) and, when
    /// `include_preferred` is set, model rationales some annotator currently
    /// flags as preferred (one line per record).
    pub fn export_sft(&self, question_id: &QuestionId, include_preferred: bool) -> Result<Vec<SftExample>, AnnotationError> {
        let q = self.question(question_id)?;
        let events = self.store.question_events(question_id)?;
        let answers: HashMap<AnswerId, StudentAnswer> = self
            .store
            .list_answers(question_id)?
            .into_iter()
            .map(|a| (a.id.clone(), a))
            .collect();
        let prompt_for = |id: &AnswerId| -> Result<String, AnnotationError> {
            let a = answers
                .get(id)
                .ok_or_else(|| AnnotationError::AnswerNotFound(id.clone()))?;
            Ok(self.prompts.compile_assessment_prompt(&q, a))
        };
        let example = |answer_id: &AnswerId, mark, rationale: &str, source| -> Result<SftExample, AnnotationError> {
            Ok(SftExample {
                schema: SFT_SCHEMA.into(),
                answer_id: answer_id.clone(),
                prompt: prompt_for(answer_id)?,
                mark,
                rationale: rationale.to_owned(),
                completion: SftCompletion { mark, rationale: rationale.to_owned() },
                source,
            })
        };

        let mut out = Vec::new();
        for e in &events {
            if let AnnotationPayload::AuthoredRationale { answer_id, mark, rationale, .. } = &e.payload {
                out.push(example(answer_id, *mark, rationale, SftSource::Human)?);
            }
        }
        // stable: keeps event order within an answer
        out.sort_by(|a, b| a.answer_id.cmp(&b.answer_id));

        if include_preferred {
            let records: HashMap<RecordId, AssessmentRecord> = self
                .store
                .question_records(question_id)?
                .into_iter()
                .map(|r| (r.id.clone(), r))
                .collect();
            let mut preferred: Vec<&AssessmentRecord> = effective_preferences(&events)
                .into_iter()
                .filter(|(_, f)| *f == PreferenceFlag::Preferred)
                .filter_map(|((_, id), _)| records.get(&id))
                .filter(|r| r.origin != RecordOrigin::Human && r.status == RecordStatus::Completed)
                .collect();
            preferred.sort_by(|a, b| (&a.answer_id, &a.provider_id, &a.id).cmp(&(&b.answer_id, &b.provider_id, &b.id)));
            preferred.dedup_by(|a, b| a.id == b.id);
            for r in preferred {
                let (Some(mark), Some(rationale)) = (r.mark, r.rationale.as_deref()) else { continue };
                out.push(example(&r.answer_id, mark, rationale, SftSource::PreferredModel)?);
            }
        }
        Ok(out)
    }
}

fn in_range(q: &Question, mark: i64) -> Result<Mark, AnnotationError> {
    if q.mark_in_range(mark) {
        Ok(mark as Mark)
    } else {
        Err(AnnotationError::OutOfRange { mark, max_mark: q.max_mark })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RubricItem;
    use crate::store::MemoryStore;

    struct Fixture {
        store: Arc<MemoryStore>,
        ann: Annotations,
    }

    fn completed(answer: &str, provider: &str, mark: Mark) -> AssessmentRecord {
        let mut r = AssessmentRecord::pending(None, "q".into(), answer.into(), provider.into(), RecordOrigin::Batch);
        r.status = RecordStatus::Completed;
        r.mark = Some(mark);
        r.rationale = Some(format!("{provider} says {mark}"));
        r
    }

    fn fixture() -> Fixture {
        let store = Arc::new(MemoryStore::new());
        store
            .insert_question(&Question {
                id: "q".into(),
                prompt_text: "p".into(),
                key_elements: vec!["k".into()],
                rubric: vec![RubricItem { points: 3, description: "d".into() }],
                max_mark: 3,
            })
            .unwrap();
        store
            .insert_answers(&[
                StudentAnswer { id: "a1".into(), question_id: "q".into(), text: "one".into(), gold_mark: Some(1) },
                StudentAnswer { id: "a2".into(), question_id: "q".into(), text: "two".into(), gold_mark: None },
            ])
            .unwrap();
        let ann = Annotations::new(store.clone(), Arc::new(PromptCompiler::builtin()));
        Fixture { store, ann }
    }

    #[test]
    fn gold_corrections_append_and_latest_wins() {
        let f = fixture();
        let u: UserId = "u".into();
        f.ann.correct_gold_label(&"a1".into(), 2, &u).unwrap();
        assert_eq!(f.ann.effective_gold(&"a1".into()).unwrap(), Some(2));
        assert_eq!(f.store.get_answer(&"a1".into()).unwrap().unwrap().gold_mark, Some(1));
        f.ann.correct_gold_label(&"a1".into(), 1, &u).unwrap();
        assert_eq!(f.ann.effective_gold(&"a1".into()).unwrap(), Some(1));
        assert_eq!(f.store.question_events(&"q".into()).unwrap().len(), 2);

        assert_eq!(
            f.ann.correct_gold_label(&"a1".into(), 9, &u),
            Err(AnnotationError::OutOfRange { mark: 9, max_mark: 3 })
        );
        assert_eq!(
            f.ann.correct_gold_label(&"zz".into(), 1, &u),
            Err(AnnotationError::AnswerNotFound("zz".into()))
        );
        assert_eq!(f.ann.effective_gold(&"a2".into()).unwrap(), None);
    }

    #[test]
    fn preference_supersession_and_preconditions() {
        let f = fixture();
        let u: UserId = "u".into();
        let r = completed("a1", "m1", 1);
        f.store.insert_record(&r).unwrap();
        f.ann.set_preference(&r.id, PreferenceFlag::Preferred, &u).unwrap();
        assert_eq!(f.ann.preference(&r.id, &u).unwrap(), Some(PreferenceFlag::Preferred));
        f.ann.set_preference(&r.id, PreferenceFlag::NotPreferred, &u).unwrap();
        assert_eq!(f.ann.preference(&r.id, &u).unwrap(), Some(PreferenceFlag::NotPreferred));

        let pending = AssessmentRecord::pending(None, "q".into(), "a1".into(), "m".into(), RecordOrigin::Batch);
        f.store.insert_record(&pending).unwrap();
        assert_eq!(
            f.ann.set_preference(&pending.id, PreferenceFlag::Preferred, &u),
            Err(AnnotationError::RecordNotCompleted(pending.id.clone()))
        );
        assert!(matches!(
            f.ann.set_preference(&"nope".into(), PreferenceFlag::Preferred, &u),
            Err(AnnotationError::RecordNotFound(_))
        ));
    }

    #[test]
    fn pairing_rule() {
        let f = fixture();
        let u: UserId = "u".into();
        let v: UserId = "v".into();
        let a = completed("a1", "alpha", 1);
        let b = completed("a1", "beta", 2);
        let c = completed("a1", "gamma", 0);
        let d = completed("a2", "alpha", 3);
        for r in [&a, &b, &c, &d] {
            f.store.insert_record(r).unwrap();
        }
        // answer 1, user u: 2 preferred × 1 not preferred
        f.ann.set_preference(&a.id, PreferenceFlag::Preferred, &u).unwrap();
        f.ann.set_preference(&b.id, PreferenceFlag::Preferred, &u).unwrap();
        f.ann.set_preference(&c.id, PreferenceFlag::NotPreferred, &u).unwrap();
        // user v flags only one side: no contrast, and never mixed with u
        f.ann.set_preference(&c.id, PreferenceFlag::Preferred, &v).unwrap();
        // answer 2: preferred only
        f.ann.set_preference(&d.id, PreferenceFlag::Preferred, &u).unwrap();

        let pairs = f.ann.export_preference_pairs(&"q".into()).unwrap();
        let summary: Vec<_> = pairs
            .iter()
            .map(|p| (p.chosen.provider.as_str(), p.rejected.provider.as_str(), p.annotator.as_str()))
            .collect();
        assert_eq!(summary, vec![("alpha", "gamma", "u"), ("beta", "gamma", "u")]);
        assert!(pairs.iter().all(|p| p.chosen.record_id != p.rejected.record_id));
        assert!(pairs[0].prompt.contains("<<<\none\n>>>"));

        let line = to_jsonl(&pairs[..1]);
        let v: serde_json::Value = serde_json::from_str(line.trim_end()).unwrap();
        assert_eq!(v["schema"], "pref-v1");
        assert_eq!(v["chosen"]["provider"], "alpha");
        assert_eq!(v["chosen"]["mark"], 1);
        assert_eq!(v["rejected"]["rationale"], "gamma says 0");
        assert_eq!(v["annotator"], "u");
    }

    #[test]
    fn sft_export() {
        let f = fixture();
        let u: UserId = "u".into();
        assert!(f.ann.export_sft(&"q".into(), true).unwrap().is_empty());
        assert_eq!(to_jsonl::<SftExample>(&[]), "");

        assert_eq!(
            f.ann.submit_rationale(&"a1".into(), 2, "  ", &u),
            Err(AnnotationError::EmptyRationale)
        );
        assert_eq!(
            f.ann.submit_rationale(&"a1".into(), -1, "x", &u),
            Err(AnnotationError::OutOfRange { mark: -1, max_mark: 3 })
        );
        let (_, human) = f.ann.submit_rationale(&"a1".into(), 2, "Names two materials.", &u).unwrap();
        assert_eq!(human.provider_id.as_str(), HUMAN_PROVIDER);

        let model = completed("a2", "alpha", 3);
        f.store.insert_record(&model).unwrap();
        f.ann.set_preference(&model.id, PreferenceFlag::Preferred, &u).unwrap();
        f.ann.set_preference(&model.id, PreferenceFlag::Preferred, &"v".into()).unwrap();
        f.ann.set_preference(&human.id, PreferenceFlag::Preferred, &u).unwrap();

        let only_human = f.ann.export_sft(&"q".into(), false).unwrap();
        assert_eq!(only_human.len(), 1);
        let expected_prompt = PromptCompiler::builtin().compile_assessment_prompt(
            &f.store.get_question(&"q".into()).unwrap().unwrap(),
            &f.store.get_answer(&"a1".into()).unwrap().unwrap(),
        );
        assert_eq!(only_human[0].prompt, expected_prompt);
        assert_eq!(only_human[0].source, SftSource::Human);

        let with_pref = f.ann.export_sft(&"q".into(), true).unwrap();
        assert_eq!(with_pref.len(), 2);
        assert_eq!(with_pref[1].source, SftSource::PreferredModel);
        assert_eq!(with_pref[1].mark, 3);
        assert_eq!(with_pref[1].rationale, "alpha says 3");
        let line: serde_json::Value = serde_json::from_str(to_jsonl(&with_pref).lines().nth(1).unwrap()).unwrap();
        assert_eq!(line["source"], "preferred_model");
        assert_eq!(line["schema"], "sft-v1");
        assert_eq!(line["completion"]["mark"], 3);
    }
}
