use std::sync::Arc;

use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use markscope_core::annotation::to_jsonl;
use markscope_core::chat::ImportedContext;
use markscope_core::evaluation::{build_report, build_reports};
use markscope_core::gateway::{ProviderKind, WireAdapter};
use markscope_core::ingest::{parse_upload, UploadFormat};
use markscope_core::metrics::reports_to_csv;
use markscope_core::{
    AnswerId, JobId, PreferenceFlag, ProviderId, Question, QuestionId, RecordId, RubricItem,
    SessionId, StudentAnswer, TaggingMode, UserProfile,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::Services;

type Svc = State<Arc<Services>>;
type ApiResult<T> = Result<T, ApiError>;

/// `Json` whose rejections use the API error body.
struct Body<T>(T);

impl<S: Send + Sync, T: serde::de::DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(v) = Json::<T>::from_request(req, state).await?;
        Ok(Body(v))
    }
}

pub fn router(services: Arc<Services>) -> Router {
    let api = Router::new()
        .route("/api/me", get(me))
        .route("/api/providers", get(providers))
        .route("/api/questions", post(create_question).get(list_questions))
        .route("/api/questions/{id}", get(get_question))
        .route("/api/questions/{id}/answers", post(upload_answers).get(list_answers))
        .route("/api/questions/{id}/batches", post(create_batch))
        .route("/api/questions/{id}/metrics", get(metrics))
        .route("/api/questions/{id}/export", get(export))
        .route("/api/batches/{id}", get(batch_status))
        .route("/api/batches/{id}/run", post(run_batch))
        .route("/api/answers/{id}/records", get(answer_records))
        .route("/api/answers/{id}/gold-correction", post(gold_correction))
        .route("/api/answers/{id}/rationale", post(submit_rationale))
        .route("/api/records/{id}/preference", post(set_preference))
        .route("/api/records/{id}/highlights", post(compute_highlight).get(cached_highlight))
        .route("/api/chat/sessions", post(create_session))
        .route("/api/chat/sessions/{id}", get(get_session))
        .route("/api/chat/sessions/{id}/messages", post(post_message))
        .route("/api/chat/sessions/{id}/regenerate", post(regenerate))
        .route_layer(middleware::from_fn_with_state(services.clone(), authenticate));
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .merge(api)
        .fallback(|| async { ApiError::not_found("route_not_found", "no such route") })
        .with_state(services)
}

async fn authenticate(State(s): Svc, mut req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let user = match token {
        Some(t) => match markscope_core::users::authenticate(s.store.as_ref(), t) {
            Ok(u) => u,
            Err(e) => return ApiError::from(e).into_response(),
        },
        None => None,
    };
    match user {
        Some(u) => {
            req.extensions_mut().insert(u);
            next.run(req).await
        }
        None => ApiError::unauthorized().into_response(),
    }
}

type User = Extension<UserProfile>;

async fn me(Extension(user): User) -> Json<UserProfile> {
    Json(user)
}

/// Provider settings without anything credential-related.
#[derive(Serialize)]
struct ProviderView {
    provider_id: ProviderId,
    kind: ProviderKind,
    model: String,
    adapter: WireAdapter,
    max_concurrent: usize,
}

async fn providers(State(s): Svc) -> Json<Vec<ProviderView>> {
    Json(
        s.engine
            .gateway()
            .providers()
            .into_iter()
            .map(|p| ProviderView {
                model: p.model_name().to_owned(),
                provider_id: p.provider_id,
                kind: p.kind,
                adapter: p.adapter,
                max_concurrent: p.max_concurrent,
            })
            .collect(),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewQuestion {
    #[serde(default)]
    id: Option<QuestionId>,
    prompt_text: String,
    key_elements: Vec<String>,
    #[serde(default)]
    rubric: Vec<RubricItem>,
    max_mark: u32,
}

async fn create_question(State(s): Svc, Body(q): Body<NewQuestion>) -> ApiResult<(StatusCode, Json<Question>)> {
    let q = Question {
        id: q.id.unwrap_or_else(QuestionId::generate),
        prompt_text: q.prompt_text,
        key_elements: q.key_elements,
        rubric: q.rubric,
        max_mark: q.max_mark,
    };
    s.engine.create_question(&q)?;
    Ok((StatusCode::CREATED, Json(q)))
}

async fn list_questions(State(s): Svc) -> ApiResult<Json<Vec<Question>>> {
    Ok(Json(s.store.list_questions()?))
}

async fn get_question(State(s): Svc, Path(id): Path<QuestionId>) -> ApiResult<Json<Question>> {
    Ok(Json(s.engine.question(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewAnswer {
    #[serde(default, alias = "answer_id")]
    id: Option<AnswerId>,
    #[serde(alias = "answer_text")]
    text: String,
    #[serde(default)]
    gold_mark: Option<i64>,
}

#[derive(Serialize)]
struct Uploaded {
    inserted: usize,
    answers: Vec<StudentAnswer>,
}

/// Accepts a JSON array, a multipart form with one CSV or JSONL file, or a
/// raw CSV / JSONL body.
async fn upload_answers(
    State(s): Svc,
    Path(id): Path<QuestionId>,
    req: Request,
) -> ApiResult<(StatusCode, Json<Uploaded>)> {
    s.engine.question(&id)?;
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let answers = if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &()).await?;
        let field = form
            .next_field()
            .await?
            .ok_or_else(|| ApiError::bad_request("invalid_upload", "no file in form"))?;
        let hint = field
            .file_name()
            .or(field.content_type())
            .unwrap_or("")
            .to_owned();
        let format = UploadFormat::detect(&hint)
            .ok_or_else(|| ApiError::bad_request("invalid_upload", format!("unrecognised file type `{hint}`")))?;
        let text = field.text().await?;
        parse_upload(format, &text, &id, s.max_upload_rows)?
    } else if let Some(format) = UploadFormat::detect(&content_type) {
        let text = String::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request("invalid_upload", e.body_text()))?;
        parse_upload(format, &text, &id, s.max_upload_rows)?
    } else {
        let Body(rows) = Body::<Vec<NewAnswer>>::from_request(req, &()).await?;
        if rows.len() > s.max_upload_rows {
            return Err(markscope_core::ingest::IngestError::TooManyRows { limit: s.max_upload_rows }.into());
        }
        rows.into_iter()
            .map(|r| StudentAnswer {
                id: r.id.unwrap_or_else(AnswerId::generate),
                question_id: id.clone(),
                text: r.text,
                gold_mark: r.gold_mark,
            })
            .collect()
    };
    s.engine.add_answers(&id, &answers)?;
    Ok((StatusCode::CREATED, Json(Uploaded { inserted: answers.len(), answers })))
}

async fn list_answers(State(s): Svc, Path(id): Path<QuestionId>) -> ApiResult<Json<Vec<StudentAnswer>>> {
    s.engine.question(&id)?;
    Ok(Json(s.store.list_answers(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewBatch {
    provider_ids: Vec<ProviderId>,
    #[serde(default)]
    answer_ids: Option<Vec<AnswerId>>,
}

async fn create_batch(
    State(s): Svc,
    Path(id): Path<QuestionId>,
    Body(b): Body<NewBatch>,
) -> ApiResult<(StatusCode, Json<markscope_core::BatchStatus>)> {
    let job = s.engine.create_batch(&id, b.answer_ids.as_deref(), &b.provider_ids)?;
    Ok((StatusCode::CREATED, Json(s.engine.get_batch_status(&job.id)?)))
}

async fn batch_status(State(s): Svc, Path(id): Path<JobId>) -> ApiResult<Json<markscope_core::BatchStatus>> {
    Ok(Json(s.engine.get_batch_status(&id)?))
}

#[derive(Deserialize)]
struct RunParams {
    #[serde(default)]
    wait: bool,
}

/// Starts the job in the background (202) or, with `?wait=true`, runs it to
/// completion (200). Re-running a finished job returns its final status.
async fn run_batch(
    State(s): Svc,
    Path(id): Path<JobId>,
    params: Result<Query<RunParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<(StatusCode, Json<markscope_core::BatchStatus>)> {
    let Query(params) = params?;
    let status = if params.wait {
        s.engine.run_batch(&id).await?
    } else {
        s.engine.start_batch(&id)?
    };
    let code = if status.terminal { StatusCode::OK } else { StatusCode::ACCEPTED };
    Ok((code, Json(status)))
}

async fn answer_records(State(s): Svc, Path(id): Path<AnswerId>) -> ApiResult<Json<Value>> {
    if s.store.get_answer(&id)?.is_none() {
        return Err(ApiError::not_found("answer_not_found", format!("answer {id} not found")));
    }
    Ok(Json(json!(s.store.answer_records(&id)?)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkBody {
    mark: i64,
}

async fn gold_correction(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<AnswerId>,
    Body(b): Body<MarkBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let event = s.annotations.correct_gold_label(&id, b.mark, &user.id)?;
    let effective = s.annotations.effective_gold(&id)?;
    Ok((StatusCode::CREATED, Json(json!({"event": event, "effective_gold_mark": effective}))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RationaleBody {
    mark: i64,
    rationale: String,
}

async fn submit_rationale(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<AnswerId>,
    Body(b): Body<RationaleBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let (event, record) = s.annotations.submit_rationale(&id, b.mark, &b.rationale, &user.id)?;
    Ok((StatusCode::CREATED, Json(json!({"event": event, "record": record}))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagBody {
    flag: PreferenceFlag,
}

async fn set_preference(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<RecordId>,
    Body(b): Body<FlagBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let event = s.annotations.set_preference(&id, b.flag, &user.id)?;
    Ok((StatusCode::CREATED, Json(json!({"event": event}))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeBody {
    mode: TaggingMode,
}

async fn compute_highlight(
    State(s): Svc,
    Path(id): Path<RecordId>,
    Body(b): Body<ModeBody>,
) -> ApiResult<Json<markscope_core::HighlightResult>> {
    Ok(Json(s.highlighter.highlight_record(&id, b.mode).await?))
}

async fn cached_highlight(
    State(s): Svc,
    Path(id): Path<RecordId>,
    params: Result<Query<ModeBody>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<markscope_core::HighlightResult>> {
    let Query(params) = params?;
    Ok(Json(s.highlighter.cached(&id, params.mode)?))
}

#[derive(Deserialize)]
struct MetricsParams {
    #[serde(default)]
    provider_id: Option<ProviderId>,
    #[serde(default)]
    format: Option<String>,
}

async fn metrics(
    State(s): Svc,
    Path(id): Path<QuestionId>,
    params: Result<Query<MetricsParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(params) = params?;
    let reports = match &params.provider_id {
        Some(p) => vec![build_report(s.store.as_ref(), &id, p)?],
        None => build_reports(s.store.as_ref(), &id)?,
    };
    match params.format.as_deref() {
        None | Some("json") => Ok(Json(json!({"question_id": id, "reports": reports})).into_response()),
        Some("csv") => Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], reports_to_csv(&reports)).into_response()),
        Some(other) => Err(ApiError::bad_request("invalid_format", format!("unknown format `{other}`"))),
    }
}

#[derive(Deserialize)]
struct ExportParams {
    kind: String,
    #[serde(default)]
    include_preferred: bool,
}

async fn export(
    State(s): Svc,
    Path(id): Path<QuestionId>,
    params: Result<Query<ExportParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(params) = params?;
    let body = match params.kind.as_str() {
        "pref" => to_jsonl(&s.annotations.export_preference_pairs(&id)?),
        "sft" => to_jsonl(&s.annotations.export_sft(&id, params.include_preferred)?),
        other => return Err(ApiError::bad_request("invalid_export_kind", format!("unknown export kind `{other}`"))),
    };
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, "application/x-ndjson".parse().unwrap());
    let disposition = format!("attachment; filename=\"{}-{}.jsonl\"", id, params.kind);
    headers.insert(
        header::CONTENT_DISPOSITION,
        disposition
            .parse()
            .map_err(|_| ApiError::bad_request("invalid_path", "question id not usable as a file name"))?,
    );
    Ok((headers, body).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    provider_id: ProviderId,
    #[serde(default)]
    context: Option<ImportedContext>,
}

async fn create_session(
    State(s): Svc,
    Extension(user): User,
    Body(b): Body<NewSession>,
) -> ApiResult<(StatusCode, Json<markscope_core::ChatSession>)> {
    let session = s.chat.create_session(&user.id, &b.provider_id, b.context)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<SessionId>,
) -> ApiResult<Json<markscope_core::ChatSession>> {
    Ok(Json(s.chat.get_session(&id, &user.id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextBody {
    text: String,
}

async fn post_message(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<SessionId>,
    Body(b): Body<TextBody>,
) -> ApiResult<Json<markscope_core::SessionMessage>> {
    Ok(Json(s.chat.post_message(&id, &user.id, &b.text).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    answer_id: AnswerId,
}

async fn regenerate(
    State(s): Svc,
    Extension(user): User,
    Path(id): Path<SessionId>,
    Body(b): Body<AnswerBody>,
) -> ApiResult<(StatusCode, Json<markscope_core::AssessmentRecord>)> {
    let record = s.chat.regenerate_assessment(&id, &user.id, &b.answer_id).await?;
    Ok((StatusCode::CREATED, Json(record)))
}
