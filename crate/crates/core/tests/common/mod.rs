#![allow(dead_code)]

use std::sync::Arc;

use async_trait::async_trait;
use markscope_core::gateway::{ProviderConfig, Transport, TransportError, WireRequest};
use markscope_core::{
    AssessmentEngine, Gateway, MemoryStore, PromptCompiler, Question, Repository, RubricItem,
    SqliteStore, StudentAnswer,
};

/// Two key elements, marks 0..=2.
pub fn vinegar_question(id: &str) -> Question {
    Question {
        id: id.into(),
        prompt_text: "Describe the additional information needed to replicate the experiment.".into(),
        key_elements: vec![
            "Measure the mass of each sample before and after".into(),
            "Record the amount of vinegar used".into(),
        ],
        rubric: vec![
            RubricItem { points: 1, description: "One key element".into() },
            RubricItem { points: 2, description: "Both key elements".into() },
        ],
        max_mark: 2,
    }
}

pub fn answer(q: &str, id: &str, text: &str, gold: Option<i64>) -> StudentAnswer {
    StudentAnswer { id: id.into(), question_id: q.into(), text: text.into(), gold_mark: gold }
}

/// Mock marks for these answers are 0, 1, 2, 2 (counted by hand against the
/// half-of-content-words rule).
pub fn four_answers(q: &str) -> Vec<StudentAnswer> {
    vec![
        answer(q, "a1", "I do not know.", Some(0)),
        answer(q, "a2", "Weigh? No: measure mass of each sample.", Some(1)),
        answer(q, "a3", "Measure the mass of each sample, and record the amount of vinegar.", Some(2)),
        answer(q, "a4", "We measure each sample and note the amount of vinegar used.", Some(1)),
    ]
}

pub struct Failing(pub u16);

#[async_trait]
impl Transport for Failing {
    async fn complete(&self, _: &ProviderConfig, _: &WireRequest) -> Result<String, TransportError> {
        Err(TransportError::Status { status: self.0, body: "down".into() })
    }
}

/// Always answers with the same text.
pub struct Canned(pub String);

#[async_trait]
impl Transport for Canned {
    async fn complete(&self, _: &ProviderConfig, _: &WireRequest) -> Result<String, TransportError> {
        Ok(self.0.clone())
    }
}

pub fn fast_remote(id: &str) -> ProviderConfig {
    ProviderConfig {
        backoff_base_ms: 1,
        ..ProviderConfig::http(id, markscope_core::ProviderKind::RemoteApi, "http://127.0.0.1:9/v1")
    }
}

pub fn engine(store: Arc<dyn Repository>) -> Arc<AssessmentEngine> {
    let gateway = Gateway::new();
    gateway.register_provider(ProviderConfig::mock("mock")).unwrap();
    Arc::new(AssessmentEngine::new(store, Arc::new(gateway), Arc::new(PromptCompiler::builtin())))
}

pub fn stores() -> Vec<(&'static str, Arc<dyn Repository>, Option<tempfile::TempDir>)> {
    let dir = tempfile::tempdir().unwrap();
    let sqlite = SqliteStore::open(dir.path().join("store.db")).unwrap();
    vec![
        ("memory", Arc::new(MemoryStore::new()), None),
        ("sqlite", Arc::new(sqlite), Some(dir)),
    ]
}
