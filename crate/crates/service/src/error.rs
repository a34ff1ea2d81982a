use aftercast_core::feedback::FeedbackError;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

/// Error body shared by every endpoint: `{code, message, details}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

pub type ApiResult<T> = Result<T, ApiError>;

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

/// Leading dotted identifier of a config message, e.g. `budget` or
/// `params.ga.population`.
fn field_of(message: &str) -> Option<&str> {
    let head = message.split_whitespace().next()?;
    head.chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        .then_some(head)
}

impl From<aftercast_core::Error> for ApiError {
    fn from(e: aftercast_core::Error) -> Self {
        use aftercast_core::Error as E;
        match &e {
            E::Internal(_) | E::Io(_) => Self::internal(e.to_string()),
            E::Config(msg) => {
                let details = field_of(msg).map_or(Value::Null, |f| json!({ "field": f }));
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()).with_details(details)
            }
            E::Parse { row, column, .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_data", e.to_string())
                .with_details(json!({ "row": row, "column": column })),
            E::Alignment(_) | E::Structure(_) | E::Dimension(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_data", e.to_string())
            }
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<FeedbackError> for ApiError {
    fn from(e: FeedbackError) -> Self {
        match e {
            FeedbackError::Rejected {
                reason,
                hint,
                raw_response,
            } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "feedback_rejected", reason)
                .with_details(json!({ "hint": hint, "raw_response": raw_response })),
            FeedbackError::Transport(msg) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable", msg)
                .with_details(json!({ "retriable": true })),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}
