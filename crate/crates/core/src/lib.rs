//! Explainable short-answer scoring: prompt compilation, a multi-provider
//! model gateway, batch assessment, highlight resolution, human annotation,
//! agreement metrics and dataset export.

pub mod annotation;
pub mod chat;
pub mod engine;
pub mod evaluation;
pub mod gateway;
pub mod highlight;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod prompt;
pub mod store;
pub mod users;

pub use annotation::{Annotations, PreferencePair, SftExample};
pub use chat::{ChatService, ChatSession, ImportedContext, SessionMessage};
pub use engine::{AssessmentEngine, BatchJob, BatchStatus, JobState, StatusCounts};
pub use gateway::{Gateway, ProviderConfig, ProviderKind, WireAdapter};
pub use highlight::{HighlightResult, HighlightSpan, Highlighter, TaggedSegment};
pub use metrics::{LabeledPairSet, MetricsReport};
pub use model::*;
pub use parse::{parse_model_output, ParsedAssessment, ParseFailure};
pub use prompt::{PromptCompiler, TaggingMode};
pub use store::{MemoryStore, Repository, SqliteStore, StoreError};
