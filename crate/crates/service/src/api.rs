//! HTTP/JSON routes over a shared [`Tutor`].
//!
//! Handlers hold the tutor lock only for the synchronous step, so requests
//! for one session are applied in arrival order and every reply reflects
//! all earlier actions.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tutor_core::content::{serialize_course, Strictness};
use tutor_core::fsm::StudentAction;

use crate::tutor::{NewStudent, Tutor, TutorError};

pub type SharedTutor = Arc<Mutex<Tutor>>;

#[derive(Debug)]
pub enum ApiError {
    Tutor(TutorError),
    BadRequest(String),
    Poisoned,
}

impl From<TutorError> for ApiError {
    fn from(e: TutorError) -> Self {
        ApiError::Tutor(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, extra) = match &self {
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request", None),
            ApiError::Poisoned => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
            ApiError::Tutor(e) => match e {
                TutorError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
                TutorError::UnknownSkill(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_skill", None),
                TutorError::IllegalAction { state, legal, .. } => (
                    StatusCode::CONFLICT,
                    "illegal_action",
                    Some(json!({ "fsm_state": state, "legal_actions": legal })),
                ),
                TutorError::SessionClosed(_) => (StatusCode::GONE, "session_closed", None),
                TutorError::InvalidAction(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_action", None),
                TutorError::InvalidCourse(_) | TutorError::BadCourseId(_) => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "invalid_course", None)
                }
                TutorError::CourseConflict(_) => (StatusCode::CONFLICT, "course_conflict", None),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
            },
        };
        let message = match &self {
            ApiError::Tutor(e) => e.to_string(),
            ApiError::BadRequest(m) => m.clone(),
            ApiError::Poisoned => "service state is unavailable after an earlier failure".into(),
        };
        let mut body = json!({ "error": code, "message": message });
        if let Some(serde_json::Value::Object(extra)) = extra {
            body.as_object_mut().expect("object").extend(extra);
        }
        (status, Json(body)).into_response()
    }
}

fn lock(tutor: &SharedTutor) -> Result<MutexGuard<'_, Tutor>, ApiError> {
    tutor.lock().map_err(|_| ApiError::Poisoned)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

pub fn router(tutor: SharedTutor) -> Router {
    Router::new()
        .route("/students", post(create_student))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/actions", post(post_action))
        .route("/sessions/{id}/events", get(get_events))
        .route("/metrics", get(metrics))
        .route("/courses", post(upload_course))
        .route("/courses/{id}", get(get_course))
        .with_state(tutor)
}

async fn create_student(State(tutor): State<SharedTutor>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let request: NewStudent = if body.is_empty() { NewStudent::default() } else { parse(&body)? };
    let profile = lock(&tutor)?.register_student(request)?;
    Ok((StatusCode::CREATED, Json(profile)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    student_id: String,
    course_id: String,
}

async fn create_session(State(tutor): State<SharedTutor>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let request: NewSession = parse(&body)?;
    let view = lock(&tutor)?.open_session(&request.student_id, &request.course_id)?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionRequest {
    action: StudentAction,
    /// Client-chosen key; a repeated key returns the first reply.
    #[serde(default)]
    action_id: Option<String>,
}

async fn post_action(
    State(tutor): State<SharedTutor>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let request: ActionRequest = parse(&body)?;
    let reply = lock(&tutor)?.post_action(&id, request.action, request.action_id)?;
    Ok(Json(reply))
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

async fn get_events(
    State(tutor): State<SharedTutor>,
    Path(id): Path<String>,
    since: Result<Query<Since>, axum::extract::rejection::QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(since) = since.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    Ok(Json(lock(&tutor)?.events_since(&id, since.since)?))
}

async fn metrics(State(tutor): State<SharedTutor>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(lock(&tutor)?.metrics()))
}

#[derive(Deserialize)]
struct UploadOptions {
    #[serde(default)]
    lenient: bool,
}

#[derive(Serialize)]
struct Uploaded {
    id: String,
    created: bool,
}

async fn upload_course(
    State(tutor): State<SharedTutor>,
    options: Result<Query<UploadOptions>, axum::extract::rejection::QueryRejection>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let Query(options) = options.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let strictness = if options.lenient { Strictness::Lenient } else { Strictness::Strict };
    let (id, created) = lock(&tutor)?.upload_course(text, strictness)?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(Uploaded { id, created })))
}

async fn get_course(State(tutor): State<SharedTutor>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let guard = lock(&tutor)?;
    let course = guard
        .course(&id)
        .ok_or_else(|| TutorError::NotFound(format!("course `{id}`")))?;
    let body = serialize_course(course);
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response())
}
