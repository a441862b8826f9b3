use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{message}")]
    InvalidChar { message: String, position: usize },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl From<lacuna_core::Error> for ApiError {
    fn from(e: lacuna_core::Error) -> Self {
        match e {
            lacuna_core::Error::UnknownChar { position, .. } => ApiError::InvalidChar {
                message: e.to_string(),
                position,
            },
            lacuna_core::Error::InvalidArgument(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ApiError::InvalidChar { message, position } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": message, "position": position }),
            ),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}
