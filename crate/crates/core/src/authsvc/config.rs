use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{MultisetTable, PasswordPolicy, BEST_OTP_DIGITS};
use super::service::{calibrate_threshold, AuthService, CalibrationTarget, VerifyScorer, FALLBACK_THRESHOLD};
use super::store::TemplateStore;
use crate::eval::{BlstmScorer, DigitSubsets, DtwScorer, EvalReport, SystemKind};
use crate::rnn::NetworkParams;

/// Environment variables starting with this override config keys, e.g.
/// `BTP_THRESHOLD=0.42`.
pub const ENV_PREFIX: &str = "BTP_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad config: {0}")]
    Parse(String),
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
    #[error(transparent)]
    Auth(#[from] super::AuthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub scorer: SystemKind,
    /// Global acceptance threshold; when absent it is calibrated from
    /// `report_file`, else [`FALLBACK_THRESHOLD`] applies.
    pub threshold: Option<f64>,
    pub report_file: Option<PathBuf>,
    /// Per-digit function subsets for `dtw-adapted`.
    pub subsets_file: Option<PathBuf>,
    /// Network checkpoint for `blstm`.
    pub network_file: Option<PathBuf>,
    pub bind: String,
    pub pin_length: usize,
    pub pin_allow_repetition: bool,
    pub otp_length: usize,
    pub otp_digits: Vec<u8>,
    /// EER band in percent applied to generated passwords.
    pub eer_band: Option<(f64, f64)>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("templates"),
            scorer: SystemKind::DtwAdapted,
            threshold: None,
            report_file: None,
            subsets_file: None,
            network_file: None,
            bind: "127.0.0.1:8080".into(),
            pin_length: 4,
            pin_allow_repetition: true,
            otp_length: 7,
            otp_digits: BEST_OTP_DIGITS.to_vec(),
            eer_band: None,
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn value_err(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| value_err(key, e))
}

fn parse_digits(key: &str, v: &str) -> Result<Vec<u8>, ConfigError> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&read(path)?)
    }

    /// Applies `BTP_*` overrides from the given variables. Unknown `BTP_`
    /// keys are rejected.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            let v = v.as_ref();
            let path = || (!v.is_empty()).then(|| PathBuf::from(v));
            match key.as_str() {
                "data_dir" => self.data_dir = PathBuf::from(v),
                "scorer" => self.scorer = parse::<SystemKind>(&key, v)?,
                "threshold" => self.threshold = if v.is_empty() { None } else { Some(parse(&key, v)?) },
                "report_file" => self.report_file = path(),
                "subsets_file" => self.subsets_file = path(),
                "network_file" => self.network_file = path(),
                "bind" => self.bind = v.to_string(),
                "pin_length" => self.pin_length = parse(&key, v)?,
                "pin_allow_repetition" => self.pin_allow_repetition = parse(&key, v)?,
                "otp_length" => self.otp_length = parse(&key, v)?,
                "otp_digits" => self.otp_digits = parse_digits(&key, v)?,
                "eer_band" => {
                    let b: Vec<f64> = v
                        .split(',')
                        .map(|s| parse(&key, s))
                        .collect::<Result<_, _>>()?;
                    self.eer_band = match b.as_slice() {
                        [] => None,
                        [lo, hi] => Some((*lo, *hi)),
                        _ => return Err(value_err(&key, "expected `lo,hi`")),
                    };
                }
                // Used by the CLI to locate the config file itself.
                "config" => {}
                _ => return Err(value_err(&key, "unknown setting")),
            }
        }
        Ok(())
    }

    /// Optional TOML file, then `BTP_*` variables from the process.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    pub fn pin_policy(&self) -> PasswordPolicy {
        PasswordPolicy {
            length: self.pin_length,
            allow_repetition: self.pin_allow_repetition,
            eer_band: self.eer_band,
            ..PasswordPolicy::pin()
        }
    }

    pub fn otp_policy(&self) -> PasswordPolicy {
        PasswordPolicy {
            length: self.otp_length,
            allowed_digits: self.otp_digits.iter().copied().collect::<BTreeSet<u8>>(),
            eer_band: self.eer_band,
            ..PasswordPolicy::otp()
        }
    }

    fn report(&self) -> Result<Option<EvalReport>, ConfigError> {
        self.report_file
            .as_deref()
            .map(|p| serde_json::from_str(&read(p)?).map_err(|e| value_err("report_file", e)))
            .transpose()
    }

    fn scorer_instance(&self) -> Result<VerifyScorer, ConfigError> {
        Ok(match self.scorer {
            SystemKind::DtwBaseline => VerifyScorer::Dtw {
                kind: SystemKind::DtwBaseline,
                scorer: DtwScorer::baseline(),
            },
            SystemKind::DtwAdapted => {
                // Digits missing from the subsets file keep the baseline set.
                let subsets = match &self.subsets_file {
                    Some(p) => serde_json::from_str::<DigitSubsets>(&read(p)?)
                        .map_err(|e| value_err("subsets_file", e))?,
                    None => DigitSubsets::default(),
                };
                VerifyScorer::Dtw {
                    kind: SystemKind::DtwAdapted,
                    scorer: DtwScorer::adapted(&subsets),
                }
            }
            SystemKind::Blstm => {
                let path = self
                    .network_file
                    .as_deref()
                    .ok_or_else(|| value_err("network_file", "required by the blstm scorer"))?;
                let params = NetworkParams::load(path).map_err(|e| value_err("network_file", e))?;
                VerifyScorer::Blstm(BlstmScorer { params })
            }
        })
    }

    pub fn build_service(&self) -> Result<AuthService, ConfigError> {
        let report = self.report()?;
        let threshold = match (self.threshold, &report) {
            (Some(t), _) => t,
            (None, Some(r)) => calibrate_threshold(r, CalibrationTarget::Eer)?,
            (None, None) => FALLBACK_THRESHOLD,
        };
        let store = TemplateStore::open(&self.data_dir)?;
        let mut svc = AuthService::new(store, self.scorer_instance()?, threshold)
            .with_policy(self.pin_policy())
            .with_policy(self.otp_policy());
        if let Some(table) = report.as_ref().and_then(|r| MultisetTable::from_report(r).ok()) {
            svc = svc.with_table(table);
        }
        Ok(svc)
    }
}
