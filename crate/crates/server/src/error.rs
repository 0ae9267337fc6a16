use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use protorec_core::features::FeatureError;
use protorec_core::ontology::OntologyError;
use protorec_core::persistence::PersistenceError;
use protorec_core::recognition::RecognitionError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("admin token required")]
    Forbidden,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("request body exceeds {0} bytes")]
    PayloadTooLarge(usize),
    #[error("{0}")]
    Unprocessable(String),
    #[error("the store has no reliable prototypes yet")]
    EmptyStore,
    #[error("{0}")]
    StorageFull(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Forbidden => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::EmptyStore => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::StorageFull(_) => StatusCode::INSUFFICIENT_STORAGE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Forbidden => "forbidden",
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "already_validated",
            ApiError::PayloadTooLarge(_) => "payload_too_large",
            ApiError::Unprocessable(_) => "unprocessable",
            ApiError::EmptyStore => "empty_store",
            ApiError::StorageFull(_) => "storage_full",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if matches!(self, ApiError::Internal(_)) {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

impl From<RecognitionError> for ApiError {
    fn from(e: RecognitionError) -> Self {
        use RecognitionError as R;
        let msg = e.to_string();
        match e {
            R::UnknownResponse | R::UnknownPrototype(_) => ApiError::NotFound(msg),
            R::AlreadyValidated => ApiError::Conflict(msg),
            R::DimensionMismatch { .. }
            | R::MetricMismatch { .. }
            | R::UnknownSynset(_)
            | R::NotAnAlternative(_)
            | R::NothingToConfirm
            | R::Vector(_) => ApiError::Unprocessable(msg),
            R::UnknownUser(_) => ApiError::NotFound(msg),
            R::Persistence(p) => p.into(),
            _ => ApiError::Internal(msg),
        }
    }
}

impl From<PersistenceError> for ApiError {
    fn from(e: PersistenceError) -> Self {
        match e {
            PersistenceError::StorageFull { .. } => ApiError::StorageFull(e.to_string()),
            PersistenceError::SchemaViolation(_) => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<FeatureError> for ApiError {
    fn from(e: FeatureError) -> Self {
        ApiError::Unprocessable(e.to_string())
    }
}

impl From<OntologyError> for ApiError {
    fn from(e: OntologyError) -> Self {
        match e {
            OntologyError::UnknownSynset(_) => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}
