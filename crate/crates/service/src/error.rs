use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{running} runs active, limit is {limit}")]
    CapacityExceeded { running: usize, limit: usize },
    #[error("no run '{0}'")]
    UnknownRun(String),
    #[error("no pending clarification '{0}'")]
    UnknownClarification(String),
    #[error("clarification '{0}' was already answered")]
    AlreadyAnswered(String),
    #[error("run '{0}' has already finished")]
    AlreadyTerminal(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::InvalidTask(_) => "InvalidTask",
            ApiError::InvalidRequest(_) => "InvalidRequest",
            ApiError::CapacityExceeded { .. } => "CapacityExceeded",
            ApiError::UnknownRun(_) => "UnknownRun",
            ApiError::UnknownClarification(_) => "UnknownClarification",
            ApiError::AlreadyAnswered(_) => "AlreadyAnswered",
            ApiError::AlreadyTerminal(_) => "AlreadyTerminal",
            ApiError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::InvalidTask(_) | ApiError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::CapacityExceeded { .. } => StatusCode::TOO_MANY_REQUESTS,
            ApiError::UnknownRun(_) | ApiError::UnknownClarification(_) => StatusCode::NOT_FOUND,
            ApiError::AlreadyAnswered(_) | ApiError::AlreadyTerminal(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        (self.status(), Json(body)).into_response()
    }
}
