//! Two-stage password verification service: template storage, password
//! policies, verification and the JSON endpoints.

mod config;
mod http;
mod policy;
mod service;
mod store;

pub use config::{ConfigError, ServiceConfig, ENV_PREFIX};
pub use http::{router, serve};
pub use policy::{count_candidates, generate_password, MultisetTable, PasswordPolicy, PolicyKind, BEST_OTP_DIGITS};
pub use service::{calibrate_threshold, AuthService, CalibrationTarget, VerifyDecision, VerifyScorer, FALLBACK_THRESHOLD};
pub use store::{TemplateStore, UserRecord};

use thiserror::Error;

use crate::capture::CaptureError;
use crate::features::FeatureError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuthError {
    #[error("at most 4 enrolment samples per digit, got {0}")]
    TooManySamples(usize),
    #[error("no enrolment samples given")]
    NoSamples,
    #[error("sample labeled {got} enrolled under digit {expected}")]
    LabelMismatch { expected: u8, got: u8 },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("no password satisfies the policy")]
    EmptyCandidateSet,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("user {user} has no template for digit {digit}")]
    NotEnrolled { user: String, digit: u8 },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("password has {expected} digits but {got} were drawn")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no threshold meets the target")]
    UnreachableTarget,
    #[error("invalid user id {0:?}")]
    InvalidUserId(String),
    #[error("digit {0} outside 0..=9")]
    InvalidDigit(u8),
    #[error("report has no {0}")]
    IncompleteReport(&'static str),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("scoring failed: {0}")]
    Scoring(String),
}
