//! JSON endpoints:
//!
//! - `POST /enroll` `{user, digit, points[]}` adds one drawing to the digit's
//!   template; `{user, digit, samples[][]}` replaces the template.
//! - `POST /password` `{user, policy, seed?, password?}` issues a password.
//! - `POST /verify` `{user, expected[], attempts[][]}` runs both stages.
//! - `GET /users/{id}` summarizes a stored record.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::policy::{PasswordPolicy, PolicyKind};
use super::service::{AuthService, VerifyDecision};
use super::store::UserRecord;
use super::AuthError;
use crate::capture::{DigitSample, SampleKey, TouchPoint};

struct ApiError(StatusCode, String, String);

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        use AuthError::*;
        let (status, kind) = match &e {
            TooManySamples(_) => (StatusCode::UNPROCESSABLE_ENTITY, "too_many_samples"),
            NoSamples => (StatusCode::UNPROCESSABLE_ENTITY, "no_samples"),
            LabelMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "label_mismatch"),
            LengthMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "length_mismatch"),
            EmptyCandidateSet => (StatusCode::UNPROCESSABLE_ENTITY, "empty_candidate_set"),
            InvalidPolicy(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy"),
            InvalidUserId(_) => (StatusCode::BAD_REQUEST, "invalid_user_id"),
            InvalidDigit(_) => (StatusCode::BAD_REQUEST, "invalid_digit"),
            Capture(_) => (StatusCode::BAD_REQUEST, "invalid_sample"),
            Feature(_) => (StatusCode::BAD_REQUEST, "invalid_sample"),
            NotEnrolled { .. } => (StatusCode::NOT_FOUND, "not_enrolled"),
            UnknownUser(_) => (StatusCode::NOT_FOUND, "unknown_user"),
            UnreachableTarget | IncompleteReport(_) => (StatusCode::CONFLICT, "unavailable"),
            StorageFailure(_) | Scoring(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, kind.to_string(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.1, "message": self.2 });
        (self.0, Json(body)).into_response()
    }
}

fn bad_request(message: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "bad_request".into(), message.to_string())
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound service work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, AuthError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal".into(), e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollRequest {
    pub user: String,
    pub digit: u8,
    #[serde(default)]
    pub points: Option<Vec<TouchPoint>>,
    #[serde(default)]
    pub samples: Option<Vec<Vec<TouchPoint>>>,
    /// Start the digit's template over with this drawing.
    #[serde(default)]
    pub replace: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EnrollResponse {
    pub user: String,
    pub digit: u8,
    /// Samples now in this digit's template.
    pub samples: usize,
    pub digits_enrolled: usize,
    pub total_samples: usize,
}

fn sample(user: &str, digit: u8, repetition: u8, points: Vec<TouchPoint>) -> Result<DigitSample, AuthError> {
    Ok(DigitSample::new(SampleKey::new(user, digit, 1, repetition), points)?)
}

async fn enroll(State(svc): State<Arc<AuthService>>, Json(req): Json<EnrollRequest>) -> ApiResult<EnrollResponse> {
    let EnrollRequest {
        user,
        digit,
        points,
        samples,
        replace,
    } = req;
    if digit > 9 {
        return Err(AuthError::InvalidDigit(digit).into());
    }
    let record = match (points, samples) {
        (Some(points), None) => {
            let user = user.clone();
            blocking(move || {
                let s = sample(&user, digit, 1, points)?;
                svc.add_sample(&user, digit, &s, replace)
            })
            .await?
        }
        (None, Some(samples)) => {
            let user = user.clone();
            blocking(move || {
                if samples.len() > 4 {
                    return Err(AuthError::TooManySamples(samples.len()));
                }
                let samples = samples
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| sample(&user, digit, i as u8 + 1, p))
                    .collect::<Result<Vec<_>, _>>()?;
                svc.enroll(&user, digit, &samples)
            })
            .await?
        }
        _ => return Err(bad_request("give exactly one of `points` or `samples`")),
    };
    Ok(Json(EnrollResponse {
        samples: record.templates.get(&digit).map_or(0, |t| t.len()),
        digits_enrolled: record.templates.len(),
        total_samples: record.sample_count(),
        user,
        digit,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Kind(PolicyKind),
    Full(PasswordPolicy),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasswordRequest {
    pub user: String,
    pub policy: PolicySpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// User-chosen PIN to validate instead of generating one.
    #[serde(default)]
    pub password: Option<Vec<u8>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PasswordResponse {
    pub user: String,
    pub kind: PolicyKind,
    pub password: Vec<u8>,
    pub candidates: u128,
    pub user_chosen: bool,
}

async fn password(State(svc): State<Arc<AuthService>>, Json(req): Json<PasswordRequest>) -> ApiResult<PasswordResponse> {
    let policy = match req.policy {
        PolicySpec::Kind(k) => svc.policy(k).clone(),
        PolicySpec::Full(p) => p,
    };
    svc.record(&req.user)?;
    let candidates = svc.count_candidates(&policy)?;
    let (password, user_chosen) = match req.password {
        Some(_) if policy.kind == PolicyKind::Otp => {
            return Err(bad_request("one-time passwords are always issued by the server"));
        }
        Some(pw) => {
            if !policy.accepts(&pw, svc.table())? {
                return Err(AuthError::InvalidPolicy("password does not satisfy the PIN policy".into()).into());
            }
            (pw, true)
        }
        None => (svc.generate_password(&policy, req.seed)?, false),
    };
    Ok(Json(PasswordResponse {
        user: req.user,
        kind: policy.kind,
        password,
        candidates,
        user_chosen,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum AttemptSpec {
    Labeled { digit: u8, points: Vec<TouchPoint> },
    /// Unlabeled drawing; its label is taken from the expected password.
    Bare(Vec<TouchPoint>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRequest {
    pub user: String,
    pub expected: Vec<u8>,
    pub attempts: Vec<AttemptSpec>,
}

async fn verify(State(svc): State<Arc<AuthService>>, Json(req): Json<VerifyRequest>) -> ApiResult<VerifyDecision> {
    let decision = blocking(move || {
        if req.expected.len() != req.attempts.len() {
            return Err(AuthError::LengthMismatch {
                expected: req.expected.len(),
                got: req.attempts.len(),
            });
        }
        let attempts = req
            .attempts
            .into_iter()
            .zip(&req.expected)
            .map(|(a, &d)| match a {
                AttemptSpec::Labeled { digit, points } => sample(&req.user, digit, 1, points),
                AttemptSpec::Bare(points) => sample(&req.user, d, 1, points),
            })
            .collect::<Result<Vec<_>, _>>()?;
        svc.verify(&req.user, &req.expected, &attempts)
    })
    .await?;
    Ok(Json(decision))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct UserSummary {
    pub user_id: String,
    pub created_at: u64,
    pub threshold_override: Option<f64>,
    /// Enrolment samples per digit.
    pub digits: BTreeMap<u8, usize>,
    pub total_samples: usize,
}

impl From<&UserRecord> for UserSummary {
    fn from(r: &UserRecord) -> Self {
        Self {
            user_id: r.user_id.clone(),
            created_at: r.created_at,
            threshold_override: r.threshold_override,
            digits: r.templates.iter().map(|(&d, t)| (d, t.len())).collect(),
            total_samples: r.sample_count(),
        }
    }
}

async fn user(State(svc): State<Arc<AuthService>>, Path(id): Path<String>) -> ApiResult<UserSummary> {
    Ok(Json(UserSummary::from(&svc.record(&id)?)))
}

pub fn router(svc: Arc<AuthService>) -> Router {
    Router::new()
        .route("/enroll", post(enroll))
        .route("/password", post(password))
        .route("/verify", post(verify))
        .route("/users/{id}", get(user))
        .with_state(svc)
}

/// Serves until the process is stopped.
pub async fn serve(svc: Arc<AuthService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(svc)).await
}
