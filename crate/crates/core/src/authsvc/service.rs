use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::policy::{count_candidates, generate_password, MultisetTable, PasswordPolicy, PolicyKind};
use super::store::{check_user_id, TemplateStore, UserRecord};
use super::AuthError;
use crate::capture::DigitSample;
use crate::dtw::Template;
use crate::eval::{eer_point, BlstmScorer, DtwScorer, EvalReport, Scorer, SystemKind};
use crate::features::{sample_features, FunctionMatrix};

/// Threshold used when neither the configuration nor a report provides one.
/// It sits between typical genuine and impostor DTW scores on the baseline
/// function set.
pub const FALLBACK_THRESHOLD: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyDecision {
    pub stage1_ok: bool,
    pub stage2_score: f64,
    pub accepted: bool,
    pub threshold_used: f64,
}

/// Scorer used for the biometric stage.
#[derive(Debug, Clone)]
pub enum VerifyScorer {
    Dtw { kind: SystemKind, scorer: DtwScorer },
    Blstm(BlstmScorer),
}

impl VerifyScorer {
    pub fn kind(&self) -> SystemKind {
        match self {
            Self::Dtw { kind, .. } => *kind,
            Self::Blstm(_) => SystemKind::Blstm,
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            Self::Dtw { scorer, .. } => scorer,
            Self::Blstm(s) => s,
        }
    }
}

impl Default for VerifyScorer {
    fn default() -> Self {
        Self::Dtw {
            kind: SystemKind::DtwBaseline,
            scorer: DtwScorer::baseline(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target", content = "value")]
pub enum CalibrationTarget {
    Eer,
    /// Highest acceptable false acceptance rate, as a fraction.
    FarAtMost(f64),
}

impl std::str::FromStr for CalibrationTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "eer" {
            return Ok(Self::Eer);
        }
        let x = s
            .strip_prefix("far<=")
            .or_else(|| s.strip_prefix("far≤"))
            .ok_or_else(|| format!("expected `eer` or `far<=x`, got {s:?}"))?;
        x.parse().map(Self::FarAtMost).map_err(|e| format!("{x:?}: {e}"))
    }
}

/// Operating threshold from a report's DET points. With perfectly separated
/// pools the EER target returns the midpoint between the highest impostor
/// and the lowest genuine score.
pub fn calibrate_threshold(report: &EvalReport, target: CalibrationTarget) -> Result<f64, AuthError> {
    let det = &report.det_points;
    if det.is_empty() {
        return Err(AuthError::IncompleteReport("DET points"));
    }
    match target {
        CalibrationTarget::Eer => {
            let (i, eer) = eer_point(det).expect("non-empty");
            let p = det[i];
            if p.far == 0.0 && p.frr == 0.0 && i > 0 {
                Ok((det[i - 1].threshold + p.threshold) / 2.0)
            } else {
                Ok(eer.threshold)
            }
        }
        CalibrationTarget::FarAtMost(x) => det
            .iter()
            .filter(|p| p.far <= x)
            .map(|p| p.threshold)
            .reduce(f64::min)
            .ok_or(AuthError::UnreachableTarget),
    }
}

type Slot = Arc<RwLock<Option<UserRecord>>>;

/// Enrolment and verification over a [`TemplateStore`]. Each user record
/// has its own lock: enrolment takes it for writing, verification for
/// reading.
pub struct AuthService {
    store: TemplateStore,
    slots: RwLock<HashMap<String, Slot>>,
    scorer: VerifyScorer,
    default_threshold: f64,
    table: Option<MultisetTable>,
    pin: PasswordPolicy,
    otp: PasswordPolicy,
}

fn poisoned<T>(_: T) -> AuthError {
    AuthError::StorageFailure("lock poisoned".into())
}

impl AuthService {
    pub fn new(store: TemplateStore, scorer: VerifyScorer, default_threshold: f64) -> Self {
        Self {
            store,
            slots: RwLock::new(HashMap::new()),
            scorer,
            default_threshold,
            table: None,
            pin: PasswordPolicy::pin(),
            otp: PasswordPolicy::otp(),
        }
    }

    /// Enables EER-band filtering with the report's multiset table.
    pub fn with_table(mut self, table: MultisetTable) -> Self {
        self.table = Some(table);
        self
    }

    pub fn with_policy(mut self, policy: PasswordPolicy) -> Self {
        match policy.kind {
            PolicyKind::Pin => self.pin = policy,
            PolicyKind::Otp => self.otp = policy,
        }
        self
    }

    pub fn default_threshold(&self) -> f64 {
        self.default_threshold
    }

    pub fn scorer_kind(&self) -> SystemKind {
        self.scorer.kind()
    }

    pub fn policy(&self, kind: PolicyKind) -> &PasswordPolicy {
        match kind {
            PolicyKind::Pin => &self.pin,
            PolicyKind::Otp => &self.otp,
        }
    }

    pub fn table(&self) -> Option<&MultisetTable> {
        self.table.as_ref()
    }

    fn slot(&self, user: &str) -> Result<Slot, AuthError> {
        check_user_id(user)?;
        if let Some(s) = self.slots.read().map_err(poisoned)?.get(user) {
            return Ok(s.clone());
        }
        let mut slots = self.slots.write().map_err(poisoned)?;
        if let Some(s) = slots.get(user) {
            return Ok(s.clone());
        }
        let slot = Arc::new(RwLock::new(self.store.load(user)?));
        slots.insert(user.to_string(), slot.clone());
        Ok(slot)
    }

    /// Applies `f` to a copy of the record, persists it, then publishes it.
    fn update(&self, user: &str, f: impl FnOnce(&mut UserRecord) -> Result<(), AuthError>) -> Result<UserRecord, AuthError> {
        let slot = self.slot(user)?;
        let mut guard = slot.write().map_err(poisoned)?;
        let mut record = guard.clone().unwrap_or_else(|| UserRecord::new(user));
        f(&mut record)?;
        self.store.save(&record)?;
        *guard = Some(record.clone());
        Ok(record)
    }

    pub fn record(&self, user: &str) -> Result<UserRecord, AuthError> {
        let slot = self.slot(user)?;
        let guard = slot.read().map_err(poisoned)?;
        guard.clone().ok_or_else(|| AuthError::UnknownUser(user.to_string()))
    }

    fn features(digit: u8, samples: &[DigitSample]) -> Result<Vec<FunctionMatrix>, AuthError> {
        if digit > 9 {
            return Err(AuthError::InvalidDigit(digit));
        }
        if samples.is_empty() {
            return Err(AuthError::NoSamples);
        }
        if samples.len() > Template::MAX_SAMPLES {
            return Err(AuthError::TooManySamples(samples.len()));
        }
        if let Some(s) = samples.iter().find(|s| s.digit() != digit) {
            return Err(AuthError::LabelMismatch {
                expected: digit,
                got: s.digit(),
            });
        }
        Ok(samples.iter().map(sample_features).collect::<Result<_, _>>()?)
    }

    fn template(user: &str, digit: u8, matrices: Vec<FunctionMatrix>) -> Result<Template, AuthError> {
        Template::new(user, digit, matrices).map_err(|e| AuthError::Scoring(e.to_string()))
    }

    /// Replaces the user's template for `digit` with the given samples.
    pub fn enroll(&self, user: &str, digit: u8, samples: &[DigitSample]) -> Result<UserRecord, AuthError> {
        check_user_id(user)?;
        let matrices = Self::features(digit, samples)?;
        let template = Self::template(user, digit, matrices)?;
        self.update(user, |r| {
            r.templates.insert(digit, template);
            Ok(())
        })
    }

    /// Adds one sample to the digit's template, or starts a new template
    /// when `replace` is set or none exists.
    pub fn add_sample(&self, user: &str, digit: u8, sample: &DigitSample, replace: bool) -> Result<UserRecord, AuthError> {
        check_user_id(user)?;
        let mut matrices = Self::features(digit, std::slice::from_ref(sample))?;
        self.update(user, |r| {
            if !replace {
                if let Some(t) = r.templates.get(&digit) {
                    if t.len() >= Template::MAX_SAMPLES {
                        return Err(AuthError::TooManySamples(t.len() + 1));
                    }
                    let mut all = t.enrolment().to_vec();
                    all.append(&mut matrices);
                    matrices = all;
                }
            }
            r.templates.insert(digit, Self::template(user, digit, matrices)?);
            Ok(())
        })
    }

    pub fn set_threshold_override(&self, user: &str, threshold: Option<f64>) -> Result<UserRecord, AuthError> {
        self.record(user)?;
        self.update(user, |r| {
            r.threshold_override = threshold;
            Ok(())
        })
    }

    /// Two-stage check. Stage 1 compares the drawn labels with the password;
    /// stage 2 averages each drawing's score against the template of the
    /// digit expected at that position.
    pub fn verify(&self, user: &str, expected: &[u8], attempts: &[DigitSample]) -> Result<VerifyDecision, AuthError> {
        if expected.len() != attempts.len() {
            return Err(AuthError::LengthMismatch {
                expected: expected.len(),
                got: attempts.len(),
            });
        }
        if expected.is_empty() {
            return Err(AuthError::NoSamples);
        }
        let slot = self.slot(user)?;
        let guard = slot.read().map_err(poisoned)?;
        let record = guard.as_ref().ok_or_else(|| AuthError::UnknownUser(user.to_string()))?;
        let templates = expected
            .iter()
            .map(|&d| {
                record.templates.get(&d).ok_or_else(|| AuthError::NotEnrolled {
                    user: user.to_string(),
                    digit: d,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let stage1_ok = attempts.iter().zip(expected).all(|(a, &d)| a.digit() == d);
        let scores = attempts
            .iter()
            .zip(&templates)
            .map(|(a, t)| {
                let probe = sample_features(a)?;
                let refs: Vec<&FunctionMatrix> = t.enrolment().iter().collect();
                self.scorer
                    .scorer()
                    .score(t.digit, &refs, &probe)
                    .map_err(|e| AuthError::Scoring(e.to_string()))
            })
            .collect::<Result<Vec<f64>, AuthError>>()?;
        let stage2_score = crate::eval::fuse(&scores).map_err(|e| AuthError::Scoring(e.to_string()))?;
        let threshold_used = record.threshold_override.unwrap_or(self.default_threshold);
        Ok(VerifyDecision {
            stage1_ok,
            stage2_score,
            accepted: stage1_ok && stage2_score >= threshold_used,
            threshold_used,
        })
    }

    pub fn count_candidates(&self, policy: &PasswordPolicy) -> Result<u128, AuthError> {
        count_candidates(policy, self.table.as_ref())
    }

    pub fn generate_password(&self, policy: &PasswordPolicy, seed: Option<u64>) -> Result<Vec<u8>, AuthError> {
        generate_password(policy, self.table.as_ref(), seed)
    }

    pub fn users(&self) -> Result<Vec<String>, AuthError> {
        self.store.users()
    }
}
