use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use defectlab_core::Error;
use serde::Serialize;
use serde_json::Value;

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error_code: code.to_string(),
                message: message.into(),
                details: Value::Null,
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::BatchMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Conflict(_) | Error::LabelConflict { .. } => StatusCode::CONFLICT,
        Error::Range(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::Json { .. }
        | Error::Structure(_)
        | Error::ClassCount { .. }
        | Error::EmptyDataset
        | Error::DuplicateId(_)
        | Error::MissingLabel(_)
        | Error::PoolExhausted
        | Error::Version { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let details = match &e {
            Error::BatchMismatch { missing, unexpected } => {
                serde_json::json!({ "missing": missing, "unexpected": unexpected })
            }
            _ => Value::Null,
        };
        ApiError {
            status: status_for(&e),
            body: ErrorBody {
                error_code: e.code().to_string(),
                message: e.to_string(),
                details,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
