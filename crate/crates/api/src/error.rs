//! Error payloads with machine-readable codes.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ces_chain::Rejection;
use ces_market::{SessionError, TxAck};
use serde::Serialize;
use serde_json::Value;

/// Machine-readable error code carried in every error payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    /// Missing or invalid bearer token.
    Auth,
    /// The caller may not do this.
    Forbidden,
    /// No such participant in the scenario.
    Unknown,
    AlreadyEnrolled,
    /// No such offer, block or resource.
    NotFound,
    /// The offer's response window has closed.
    Expired,
    /// The offer was already answered.
    Duplicate,
    /// The contracts refused the transaction for another reason.
    Rejected,
    /// The session is not in a state that allows this.
    Sequence,
    BadRequest,
    Internal,
}

impl ErrorCode {
    fn status(self) -> StatusCode {
        match self {
            ErrorCode::Auth => StatusCode::UNAUTHORIZED,
            ErrorCode::Forbidden => StatusCode::FORBIDDEN,
            ErrorCode::Unknown | ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::AlreadyEnrolled | ErrorCode::Duplicate | ErrorCode::Sequence => StatusCode::CONFLICT,
            ErrorCode::Expired => StatusCode::GONE,
            ErrorCode::Rejected => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    /// The committed transaction, when the contracts refused it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tx: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            tx: None,
        }
    }

    pub fn auth() -> Self {
        Self::new(ErrorCode::Auth, "missing or invalid bearer token")
    }

    pub fn operator_only() -> Self {
        Self::new(ErrorCode::Forbidden, "operator credential required")
    }

    /// A transaction that was ordered but refused by the contracts.
    pub fn rejected(ack: &TxAck, reason: &Rejection) -> Self {
        let code = match reason {
            Rejection::UnknownOffer { .. } => ErrorCode::NotFound,
            Rejection::ExpiredOffer { .. } => ErrorCode::Expired,
            Rejection::Forbidden { .. } => ErrorCode::Forbidden,
            Rejection::DoubleResponse { .. } | Rejection::DuplicateTxId => ErrorCode::Duplicate,
            _ => ErrorCode::Rejected,
        };
        Self {
            code,
            message: reason.to_string(),
            tx: serde_json::to_value(ack).ok(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match &e {
            SessionError::Sequence(_) => ApiError::new(ErrorCode::Sequence, e.to_string()),
            SessionError::UnknownParty(_) => ApiError::new(ErrorCode::Unknown, e.to_string()),
            _ => ApiError::new(ErrorCode::Internal, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
