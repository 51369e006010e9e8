//! Handwritten touchscreen password verification.
//!
//! Digits drawn on a touchscreen are turned into 21 normalized time
//! functions and compared either with dynamic time warping or with a
//! Siamese bidirectional LSTM. Per-digit scores are averaged over the digits
//! of a password.

pub mod authsvc;
pub mod bank;
pub mod capture;
pub mod dtw;
pub mod eval;
pub mod features;
pub mod rnn;
pub mod sffs;
pub mod synth;

pub use bank::FeatureBank;
pub use capture::{CaptureError, Dataset, DigitSample, SampleKey, TouchPoint};
pub use dtw::{dtw_match, score_against_template, DtwError, DtwResult, Template};
pub use eval::{compute_eer, fuse, search_passwords, EvalError, EvalReport, ScoreSet};
pub use features::{extract, sample_features, znorm, FeatureError, FunctionMatrix, FunctionSubset};
pub use rnn::{forward_pair, NetworkParams, RnnError};
pub use sffs::{sffs_select, SelectionTrace, SffsConfig, SffsError};
