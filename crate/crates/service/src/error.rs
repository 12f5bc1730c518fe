use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("prompt must be nonempty")]
    EmptyPrompt,

    #[error("prompt {0:?} is not in the bank and no external embedder is configured")]
    NoEmbedderConfigured(String),

    #[error("embedding provider unreachable: {0}")]
    ProviderUnreachable(String),

    #[error("embedding provider timed out after {0} ms")]
    ProviderTimeout(u64),

    #[error("embedding provider sent an invalid response: {0}")]
    BadProviderResponse(String),

    #[error("dimension mismatch: session uses {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error("image {0:?} has no display image")]
    NoDisplayImage(String),

    #[error("no 3D map loaded")]
    NoMapLoaded,

    #[error("no class references loaded for {0} mode")]
    MissingReferences(&'static str),

    #[error("no probe weights loaded")]
    MissingProbe,

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error(transparent)]
    Core(#[from] dve_core::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl ServiceError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::EmptyPrompt => "EmptyPrompt",
            ServiceError::NoEmbedderConfigured(_) => "NoEmbedderConfigured",
            ServiceError::ProviderUnreachable(_) => "ProviderUnreachable",
            ServiceError::ProviderTimeout(_) => "ProviderTimeout",
            ServiceError::BadProviderResponse(_) => "BadProviderResponse",
            ServiceError::DimMismatch { .. } => "DimMismatch",
            ServiceError::UnknownImage(_) => "UnknownImage",
            ServiceError::NoDisplayImage(_) => "NoDisplayImage",
            ServiceError::NoMapLoaded => "NoMapLoaded",
            ServiceError::MissingReferences(_) => "MissingReferences",
            ServiceError::MissingProbe => "MissingProbe",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Core(_) => "InvalidArtifact",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::EmptyPrompt | ServiceError::BadRequest(_) | ServiceError::Core(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownImage(_) | ServiceError::NoDisplayImage(_) => StatusCode::NOT_FOUND,
            ServiceError::NoMapLoaded | ServiceError::MissingReferences(_) | ServiceError::MissingProbe => {
                StatusCode::CONFLICT
            }
            ServiceError::NoEmbedderConfigured(_) | ServiceError::DimMismatch { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::ProviderUnreachable(_) | ServiceError::BadProviderResponse(_) => StatusCode::BAD_GATEWAY,
            ServiceError::ProviderTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
