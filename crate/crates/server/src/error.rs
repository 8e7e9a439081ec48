//! Module errors to HTTP: validation 400, missing 404, conflict or busy 409,
//! provider failure 502, everything else 500. Bodies are always
//! `{"error": {"code", "message"}}`.

use axum::extract::multipart::MultipartError;
use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use markscope_core::annotation::AnnotationError;
use markscope_core::chat::ChatError;
use markscope_core::engine::EngineError;
use markscope_core::evaluation::EvaluationError;
use markscope_core::gateway::GatewayError;
use markscope_core::highlight::HighlightRequestError;
use markscope_core::ingest::IngestError;
use markscope_core::metrics::MetricsError;
use markscope_core::StoreError;
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_owned(), message: message.into() }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    fn internal(code: &str, detail: impl std::fmt::Display) -> Self {
        tracing::error!(code, %detail, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, code, "internal error")
    }

    fn from_code(status: StatusCode, code: &str, err: impl std::fmt::Display) -> Self {
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            Self::internal(code, err)
        } else {
            Self::new(status, code, err.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

fn store_status(e: &StoreError) -> StatusCode {
    match e {
        StoreError::Conflict(_) => StatusCode::CONFLICT,
        StoreError::NotFound(_) => StatusCode::NOT_FOUND,
        StoreError::Invariant(_) | StoreError::Backend(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn gateway_status(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::UnknownProvider(_) | GatewayError::InvalidConfig(_) | GatewayError::EmptyPrompt => {
            StatusCode::BAD_REQUEST
        }
        GatewayError::ProviderFailed { .. } | GatewayError::Timeout { .. } => StatusCode::BAD_GATEWAY,
    }
}

fn engine_status(e: &EngineError) -> StatusCode {
    match e {
        EngineError::QuestionNotFound(_) | EngineError::AnswerNotFound(_) | EngineError::JobNotFound(_) => {
            StatusCode::NOT_FOUND
        }
        EngineError::EmptyBatch
        | EngineError::UnknownProvider(_)
        | EngineError::InvalidQuestion(_)
        | EngineError::InvalidAnswers(_) => StatusCode::BAD_REQUEST,
        EngineError::JobAlreadyRunning(_) => StatusCode::CONFLICT,
        EngineError::Store(s) => store_status(s),
    }
}

fn metrics_status(e: &MetricsError) -> StatusCode {
    match e {
        MetricsError::NoEvaluableRecords | MetricsError::EmptyPairSet => StatusCode::NOT_FOUND,
        MetricsError::SingleClassRange | MetricsError::ValueOutOfRange { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn status_of_annotation(e: &AnnotationError) -> StatusCode {
    match e {
        AnnotationError::AnswerNotFound(_) | AnnotationError::RecordNotFound(_) | AnnotationError::QuestionNotFound(_) => {
            StatusCode::NOT_FOUND
        }
        AnnotationError::RecordNotCompleted(_) => StatusCode::CONFLICT,
        AnnotationError::OutOfRange { .. } | AnnotationError::EmptyRationale => StatusCode::BAD_REQUEST,
        AnnotationError::Store(s) => store_status(s),
    }
}

fn chat_status(e: &ChatError) -> StatusCode {
    match e {
        ChatError::SessionNotFound(_)
        | ChatError::RecordNotFound(_)
        | ChatError::QuestionNotFound(_)
        | ChatError::AnswerNotFound(_) => StatusCode::NOT_FOUND,
        ChatError::SessionBusy(_) => StatusCode::CONFLICT,
        ChatError::UnknownProvider(_) | ChatError::NoImportedContext | ChatError::EmptyMessage => {
            StatusCode::BAD_REQUEST
        }
        ChatError::Provider(g) => gateway_status(g),
        ChatError::Engine(e) => engine_status(e),
        ChatError::Store(s) => store_status(s),
    }
}

fn highlight_status(e: &HighlightRequestError) -> StatusCode {
    match e {
        HighlightRequestError::RecordNotFound(_)
        | HighlightRequestError::NotComputed(_)
        | HighlightRequestError::Missing(_) => StatusCode::NOT_FOUND,
        HighlightRequestError::RecordNotCompleted(_) => StatusCode::CONFLICT,
        HighlightRequestError::Prompt(_) => StatusCode::BAD_REQUEST,
        // the tagging provider answered with something unusable
        HighlightRequestError::Tagging(_) => StatusCode::BAD_GATEWAY,
        HighlightRequestError::Provider(g) => gateway_status(g),
        HighlightRequestError::Store(s) => store_status(s),
    }
}

fn evaluation_status(e: &EvaluationError) -> StatusCode {
    match e {
        EvaluationError::QuestionNotFound(_) => StatusCode::NOT_FOUND,
        EvaluationError::Metrics(m) => metrics_status(m),
        EvaluationError::Store(s) => store_status(s),
    }
}

macro_rules! map_error {
    ($ty:ty, $status:expr) => {
        impl From<$ty> for ApiError {
            fn from(e: $ty) -> Self {
                #[allow(clippy::redundant_closure_call)]
                let status = ($status)(&e);
                ApiError::from_code(status, e.code(), e)
            }
        }
    };
}

map_error!(StoreError, store_status);
map_error!(GatewayError, gateway_status);
map_error!(EngineError, engine_status);
map_error!(AnnotationError, status_of_annotation);
map_error!(ChatError, chat_status);
map_error!(HighlightRequestError, highlight_status);
map_error!(EvaluationError, evaluation_status);
map_error!(IngestError, |_: &IngestError| StatusCode::BAD_REQUEST);

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request("invalid_json", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request("invalid_query", e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::bad_request("invalid_path", e.body_text())
    }
}

impl From<MultipartRejection> for ApiError {
    fn from(e: MultipartRejection) -> Self {
        ApiError::bad_request("invalid_upload", e.body_text())
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        ApiError::bad_request("invalid_upload", e.body_text())
    }
}
