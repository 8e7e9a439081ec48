//! Chat sessions that can import marking context (a question plus completed
//! assessment records) and relay turns to one provider.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AssessmentEngine, EngineError};
use crate::gateway::{ChatMessage, GatewayError, Role};
use crate::model::{
    AnswerId, AssessmentRecord, ProviderId, QuestionId, RecordId, RecordOrigin, RecordStatus,
    SessionId, UserId,
};
use crate::prompt::ContextEntry;
use crate::store::{Repository, StoreError};

pub const DEFAULT_DIGEST_BUDGET: usize = 4000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedContext {
    pub question_id: QuestionId,
    pub record_ids: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMessage {
    pub role: Role,
    pub content: String,
    pub timestamp: DateTime<Utc>,
}

impl SessionMessage {
    fn now(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: SessionId,
    pub user_id: UserId,
    pub provider_id: ProviderId,
    pub context: Option<ImportedContext>,
    #[serde(default)]
    pub messages: Vec<SessionMessage>,
    pub created_at: DateTime<Utc>,
}

impl ChatSession {
    pub fn new(user_id: UserId, provider_id: ProviderId, context: Option<ImportedContext>) -> Self {
        Self {
            id: SessionId::generate(),
            user_id,
            provider_id,
            context,
            messages: Vec::new(),
            created_at: Utc::now(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("session {0} not found")]
    SessionNotFound(SessionId),
    #[error("session {0} already has a turn in flight")]
    SessionBusy(SessionId),
    #[error("unknown provider {0}")]
    UnknownProvider(ProviderId),
    #[error("record {0} not found or not completed")]
    RecordNotFound(RecordId),
    #[error("question {0} not found")]
    QuestionNotFound(QuestionId),
    #[error("answer {0} not found")]
    AnswerNotFound(AnswerId),
    #[error("session has no imported context for this answer's question")]
    NoImportedContext,
    #[error("message text is empty")]
    EmptyMessage,
    #[error("provider failed: {0}")]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ChatError {
    pub fn code(&self) -> &'static str {
        match self {
            ChatError::SessionNotFound(_) => "session_not_found",
            ChatError::SessionBusy(_) => "session_busy",
            ChatError::UnknownProvider(_) => "unknown_provider",
            ChatError::RecordNotFound(_) => "record_not_found",
            ChatError::QuestionNotFound(_) => "question_not_found",
            ChatError::AnswerNotFound(_) => "answer_not_found",
            ChatError::NoImportedContext => "no_imported_context",
            ChatError::EmptyMessage => "empty_message",
            ChatError::Provider(e) => e.code(),
            ChatError::Engine(e) => e.code(),
            ChatError::Store(e) => e.code(),
        }
    }
}

/// User and assistant turns as `User: ...` / `Assistant: ...` paragraphs,
/// keeping the newest `budget` characters.
pub fn discussion_digest(messages: &[SessionMessage], budget: usize) -> String {
    let full = messages
        .iter()
        .filter_map(|m| match m.role {
            Role::User => Some(format!("User: {}", m.content)),
            Role::Assistant => Some(format!("Assistant: {}", m.content)),
            Role::System => None,
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let n = full.chars().count();
    if n <= budget {
        return full;
    }
    full.chars().skip(n - budget).collect()
}

/// Clears the busy flag when a turn ends, however it ends.
struct TurnGuard<'a> {
    store: &'a dyn Repository,
    id: &'a SessionId,
}

impl Drop for TurnGuard<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.store.release_session(self.id) {
            tracing::warn!(session = %self.id, error = %e, "failed to release chat session");
        }
    }
}

pub struct ChatService {
    engine: Arc<AssessmentEngine>,
    digest_budget: usize,
}

impl ChatService {
    pub fn new(engine: Arc<AssessmentEngine>) -> Self {
        Self {
            engine,
            digest_budget: DEFAULT_DIGEST_BUDGET,
        }
    }

    pub fn with_digest_budget(mut self, budget: usize) -> Self {
        self.digest_budget = budget;
        self
    }

    fn store(&self) -> &dyn Repository {
        self.engine.store().as_ref()
    }

    pub fn create_session(
        &self,
        user: &UserId,
        provider: &ProviderId,
        context: Option<ImportedContext>,
    ) -> Result<ChatSession, ChatError> {
        if !self.engine.gateway().contains(provider) {
            return Err(ChatError::UnknownProvider(provider.clone()));
        }
        let mut session = ChatSession::new(user.clone(), provider.clone(), context.clone());
        if let Some(ctx) = context {
            let q = self
                .store()
                .get_question(&ctx.question_id)?
                .ok_or_else(|| ChatError::QuestionNotFound(ctx.question_id.clone()))?;
            let mut loaded: Vec<(AssessmentRecord, String)> = Vec::new();
            for id in &ctx.record_ids {
                let r = self
                    .store()
                    .get_record(id)?
                    .filter(|r| r.status == RecordStatus::Completed && r.question_id == q.id)
                    .ok_or_else(|| ChatError::RecordNotFound(id.clone()))?;
                let a = self
                    .store()
                    .get_answer(&r.answer_id)?
                    .ok_or_else(|| ChatError::AnswerNotFound(r.answer_id.clone()))?;
                loaded.push((r, a.text));
            }
            let entries: Vec<_> = loaded
                .iter()
                .map(|(record, text)| ContextEntry { record, answer_text: text })
                .collect();
            let text = self.engine.prompts().compile_chat_context(&q, &entries);
            session.messages.push(SessionMessage::now(Role::System, text));
        }
        self.store().insert_session(&session)?;
        Ok(session)
    }

    /// Sessions are private to the user who opened them.
    pub fn get_session(&self, id: &SessionId, user: &UserId) -> Result<ChatSession, ChatError> {
        self.store()
            .get_session(id)?
            .filter(|s| &s.user_id == user)
            .ok_or_else(|| ChatError::SessionNotFound(id.clone()))
    }

    /// Runs one turn. The user message is stored before the provider is
    /// called, so a failed turn keeps it; re-posting the same text after a
    /// failure re-sends the identical history instead of duplicating it.
    pub async fn post_message(
        &self,
        id: &SessionId,
        user: &UserId,
        text: &str,
    ) -> Result<SessionMessage, ChatError> {
        if text.trim().is_empty() {
            return Err(ChatError::EmptyMessage);
        }
        self.get_session(id, user)?;
        if !self.store().try_acquire_session(id)? {
            return Err(ChatError::SessionBusy(id.clone()));
        }
        let _guard = TurnGuard { store: self.store(), id };
        let session = self.get_session(id, user)?;
        let mut history = session.messages;
        let dangling = history
            .last()
            .is_some_and(|m| m.role == Role::User && m.content == text);
        if !dangling {
            let msg = SessionMessage::now(Role::User, text);
            self.store().append_messages(id, std::slice::from_ref(&msg))?;
            history.push(msg);
        }
        let wire = history
            .iter()
            .map(|m| ChatMessage { role: m.role, content: m.content.clone() })
            .collect();
        let reply = self.engine.gateway().chat(&session.provider_id, wire).await?;
        let msg = SessionMessage::now(Role::Assistant, reply.text);
        self.store().append_messages(id, std::slice::from_ref(&msg))?;
        Ok(msg)
    }

    /// Re-assesses an answer from the imported question with the session's
    /// provider, appending a digest of the discussion to the assessment
    /// prompt. Always creates a new record.
    pub async fn regenerate_assessment(
        &self,
        id: &SessionId,
        user: &UserId,
        answer_id: &AnswerId,
    ) -> Result<AssessmentRecord, ChatError> {
        let session = self.get_session(id, user)?;
        let ctx = session.context.as_ref().ok_or(ChatError::NoImportedContext)?;
        let answer = self
            .store()
            .get_answer(answer_id)?
            .ok_or_else(|| ChatError::AnswerNotFound(answer_id.clone()))?;
        if answer.question_id != ctx.question_id {
            return Err(ChatError::NoImportedContext);
        }
        let digest = discussion_digest(&session.messages, self.digest_budget);
        let suffix = (!digest.is_empty())
            .then(|| format!("\nDiscussion so far (most recent last):\n{digest}\n"));
        Ok(self
            .engine
            .run_single(&ctx.question_id, answer_id, &session.provider_id, RecordOrigin::Chat, suffix)
            .await?)
    }
}
