//! Python bindings. Strokes cross the boundary as lists of `(x, y, t)`
//! tuples; reports come back as plain dicts.

use std::path::PathBuf;

use biotouch::authsvc::{self, AuthError, AuthService, PasswordPolicy, PolicyKind, TemplateStore, VerifyScorer};
use biotouch::capture::{self, DigitSample as CoreSample, SampleKey, TouchPoint};
use biotouch::eval::{self, DtwScorer, EvalData, ScoreSet, SystemKind};
use biotouch::features::{self, FunctionMatrix, FunctionSubset};
use biotouch::rnn::{self, NetworkParams};
use biotouch::sffs::{self, SffsConfig};
use biotouch::synth::{self, SynthConfig};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn auth_err(e: AuthError) -> PyErr {
    match e {
        AuthError::UnknownUser(_) | AuthError::NotEnrolled { .. } => PyKeyError::new_err(e.to_string()),
        AuthError::StorageFailure(_) => PyRuntimeError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn points_of(points: Vec<(f64, f64, f64)>) -> Vec<TouchPoint> {
    points.into_iter().map(|(x, y, t)| TouchPoint::new(x, y, t)).collect()
}

fn subset_of(functions: Option<Vec<usize>>) -> PyResult<FunctionSubset> {
    match functions {
        Some(f) => FunctionSubset::new(&f).map_err(value_err),
        None => Ok(FunctionSubset::all()),
    }
}

/// One drawn digit.
#[pyclass(name = "DigitSample", module = "biotouch", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: CoreSample,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (user, digit, points, session = 1, repetition = 1))]
    fn new(user: &str, digit: u8, points: Vec<(f64, f64, f64)>, session: u8, repetition: u8) -> PyResult<Self> {
        let key = SampleKey::new(user, digit, session, repetition);
        CoreSample::new(key, points_of(points)).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn user(&self) -> String {
        self.inner.key.user_id.clone()
    }

    #[getter]
    fn digit(&self) -> u8 {
        self.inner.key.digit
    }

    #[getter]
    fn session(&self) -> u8 {
        self.inner.key.session
    }

    #[getter]
    fn repetition(&self) -> u8 {
        self.inner.key.repetition
    }

    fn points(&self) -> Vec<(f64, f64, f64)> {
        self.inner.points().iter().map(|p| (p.x, p.y, p.t)).collect()
    }

    /// Normalized time functions, one row of 21 values per point.
    fn features(&self) -> PyResult<Vec<Vec<f64>>> {
        let m = features::sample_features(&self.inner).map_err(value_err)?;
        Ok(m.frames().iter().map(|f| f.to_vec()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DigitSample({}, {} points)", self.inner.key, self.inner.len())
    }
}

/// A corpus of samples keyed by user, digit, session and repetition.
#[pyclass(name = "Dataset", module = "biotouch", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: capture::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(samples: Vec<PySample>) -> PyResult<Self> {
        capture::Dataset::from_samples(samples.into_iter().map(|s| s.inner))
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        capture::load_dataset(&path).map(|r| Self { inner: r.dataset }).map_err(value_err)
    }

    #[staticmethod]
    #[pyo3(signature = (writers, seed = 1))]
    fn synthetic(writers: usize, seed: u64) -> Self {
        Self {
            inner: synth::generate(&SynthConfig::new(writers, seed)),
        }
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        capture::write_dataset(&self.inner, &path).map_err(value_err)
    }

    fn users(&self) -> Vec<String> {
        self.inner.users()
    }

    fn sample(&self, user: &str, digit: u8, session: u8, repetition: u8) -> Option<PySample> {
        self.inner
            .sample(user, digit, session, repetition)
            .map(|s| PySample { inner: s.clone() })
    }

    /// Development and evaluation halves; the first `dev_users` users go to development.
    fn split(&self, dev_users: usize) -> (PyDataset, PyDataset) {
        let s = self.inner.split(dev_users);
        (Self { inner: s.development }, Self { inner: s.evaluation })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Elastic match of two samples over the given functions (1-based; all 21 by
/// default). Returns `(distance, path_length, score)`.
#[pyfunction]
#[pyo3(signature = (a, b, functions = None))]
fn dtw_match(a: &PySample, b: &PySample, functions: Option<Vec<usize>>) -> PyResult<(f64, usize, f64)> {
    let subset = subset_of(functions)?;
    let fa = features::sample_features(&a.inner).map_err(value_err)?;
    let fb = features::sample_features(&b.inner).map_err(value_err)?;
    let r = biotouch::dtw::dtw_match(&fa, &fb, &subset).map_err(value_err)?;
    Ok((r.distance, r.path_len, r.score))
}

/// Same as [`dtw_match`] on raw per-frame rows (already normalized).
#[pyfunction]
#[pyo3(signature = (a, b, functions = None))]
fn dtw_rows(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, functions: Option<Vec<usize>>) -> PyResult<(f64, usize, f64)> {
    let width = a.iter().chain(&b).map(Vec::len).max().unwrap_or(0);
    let subset = match functions {
        Some(f) => FunctionSubset::new(&f).map_err(value_err)?,
        None => FunctionSubset::new(&(1..=width.max(1)).collect::<Vec<_>>()).map_err(value_err)?,
    };
    let to_matrix = |rows: Vec<Vec<f64>>| -> PyResult<FunctionMatrix> {
        let mut frames = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() > features::NUM_FUNCTIONS {
                return Err(value_err(format!("rows hold at most {} values", features::NUM_FUNCTIONS)));
            }
            let mut f = [0.0; features::NUM_FUNCTIONS];
            f[..r.len()].copy_from_slice(&r);
            frames.push(f);
        }
        Ok(FunctionMatrix::from_frames(frames, true))
    };
    let r = biotouch::dtw::dtw_match(&to_matrix(a)?, &to_matrix(b)?, &subset).map_err(value_err)?;
    Ok((r.distance, r.path_len, r.score))
}

/// `(eer_percent, threshold)` for genuine and impostor score lists.
#[pyfunction]
fn compute_eer(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<(f64, f64)> {
    let e = eval::compute_eer(&ScoreSet::new(genuine, impostor)).map_err(value_err)?;
    Ok((e.eer, e.threshold))
}

/// Floating forward selection with a Python objective (lower is better).
/// Returns the selection trace as a dict.
#[pyfunction]
#[pyo3(signature = (candidates, objective, max_size))]
fn sffs_select<'py>(
    py: Python<'py>,
    candidates: Vec<usize>,
    objective: Py<PyAny>,
    max_size: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let failure = std::sync::Mutex::new(None::<PyErr>);
    let f = |subset: &[usize]| -> f64 {
        Python::attach(|py| {
            match objective.call1(py, (subset.to_vec(),)).and_then(|r| r.extract::<f64>(py)) {
                Ok(v) => v,
                Err(e) => {
                    failure.lock().expect("failure slot").get_or_insert(e);
                    f64::NAN
                }
            }
        })
    };
    // Sequential: the objective re-enters the interpreter on this thread.
    let cfg = SffsConfig { parallel: false, ..SffsConfig::new(max_size) };
    let trace = sffs::sffs_select(&candidates, f, &cfg);
    if let Some(e) = failure.into_inner().expect("failure slot") {
        return Err(e);
    }
    to_json(py, &trace.map_err(value_err)?)
}

/// Per-digit EER table as a dict. `subsets` maps digits to 1-based function
/// lists for `dtw-adapted`; `network` is a checkpoint path for `blstm`.
#[pyfunction]
#[pyo3(signature = (dataset, system = "dtw-baseline", n_enrol = 1, digits = None, subsets = None, network = None))]
fn evaluate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    system: &str,
    n_enrol: usize,
    digits: Option<Vec<u8>>,
    subsets: Option<std::collections::BTreeMap<u8, Vec<usize>>>,
    network: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: SystemKind = system.parse().map_err(PyValueError::new_err)?;
    let digits = digits.unwrap_or_else(|| (0..10).collect());
    let data = dataset.inner.clone();
    let report = py.detach(move || -> PyResult<eval::EvalReport> {
        let data = EvalData::new(data);
        match kind {
            SystemKind::Blstm => {
                let path = network.ok_or_else(|| value_err("blstm needs a network checkpoint"))?;
                let params = NetworkParams::load(&path).map_err(value_err)?;
                eval::run_digit_table(&data, kind, &eval::BlstmScorer { params }, n_enrol, &digits).map_err(value_err)
            }
            _ => {
                let mut per_digit = eval::DigitSubsets::default();
                for (d, f) in subsets.unwrap_or_default() {
                    per_digit.0.insert(d, FunctionSubset::new(&f).map_err(value_err)?);
                }
                let scorer = match kind {
                    SystemKind::DtwBaseline => DtwScorer::baseline(),
                    _ => DtwScorer::adapted(&per_digit),
                };
                eval::run_digit_table(&data, kind, &scorer, n_enrol, &digits).map_err(value_err)
            }
        }
    })?;
    to_json(py, &report)
}

/// Per-digit function selection on a development set; returns
/// `{digit: [functions]}`.
#[pyfunction]
#[pyo3(signature = (dataset, n_enrol = 1, max_size = features::NUM_FUNCTIONS))]
fn select_functions<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    n_enrol: usize,
    max_size: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset.inner.clone();
    let subsets = py
        .detach(move || eval::select_all_digits(&EvalData::new(data), n_enrol, max_size))
        .map_err(value_err)?
        .0;
    let plain: std::collections::BTreeMap<u8, Vec<usize>> =
        subsets.0.iter().map(|(d, s)| (*d, s.functions())).collect();
    to_json(py, &plain)
}

/// Siamese BLSTM parameters.
#[pyclass(name = "BlstmNetwork", module = "biotouch", frozen)]
pub struct PyNetwork {
    params: NetworkParams,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        Self {
            params: NetworkParams::init(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        NetworkParams::load(&path).map(|params| Self { params }).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(value_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Symmetric similarity in (0, 1).
    fn score(&self, a: &PySample, b: &PySample) -> PyResult<f64> {
        let fa = features::sample_features(&a.inner).map_err(value_err)?;
        let fb = features::sample_features(&b.inner).map_err(value_err)?;
        rnn::forward_pair(&self.params, &fa, &fb).map_err(value_err)
    }
}

/// Two-stage verifier backed by a template directory.
#[pyclass(name = "AuthService", module = "biotouch", frozen)]
pub struct PyAuthService {
    inner: AuthService,
}

fn policy_of(kind: &str) -> PyResult<PolicyKind> {
    match kind {
        "pin" => Ok(PolicyKind::Pin),
        "otp" => Ok(PolicyKind::Otp),
        other => Err(value_err(format!("unknown policy {other:?}"))),
    }
}

#[pymethods]
impl PyAuthService {
    #[new]
    #[pyo3(signature = (data_dir, threshold = authsvc::FALLBACK_THRESHOLD))]
    fn new(data_dir: PathBuf, threshold: f64) -> PyResult<Self> {
        let store = TemplateStore::open(data_dir).map_err(auth_err)?;
        Ok(Self {
            inner: AuthService::new(store, VerifyScorer::default(), threshold),
        })
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.default_threshold()
    }

    /// Replaces the template of one digit; returns the stored sample count.
    fn enroll(&self, py: Python<'_>, user: &str, digit: u8, samples: Vec<PySample>) -> PyResult<usize> {
        let samples: Vec<CoreSample> = samples.into_iter().map(|s| s.inner).collect();
        let record = py.detach(|| self.inner.enroll(user, digit, &samples)).map_err(auth_err)?;
        Ok(record.templates.get(&digit).map_or(0, |t| t.len()))
    }

    fn verify<'py>(
        &self,
        py: Python<'py>,
        user: &str,
        expected: Vec<u8>,
        attempts: Vec<PySample>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let attempts: Vec<CoreSample> = attempts.into_iter().map(|s| s.inner).collect();
        let decision = py.detach(|| self.inner.verify(user, &expected, &attempts)).map_err(auth_err)?;
        to_json(py, &decision)
    }

    #[pyo3(signature = (kind = "pin", seed = None))]
    fn generate_password(&self, kind: &str, seed: Option<u64>) -> PyResult<Vec<u8>> {
        let policy: PasswordPolicy = self.inner.policy(policy_of(kind)?).clone();
        self.inner.generate_password(&policy, seed).map_err(auth_err)
    }

    #[pyo3(signature = (kind = "pin"))]
    fn count_candidates(&self, kind: &str) -> PyResult<u128> {
        let policy = self.inner.policy(policy_of(kind)?).clone();
        self.inner.count_candidates(&policy).map_err(auth_err)
    }

    fn users(&self) -> PyResult<Vec<String>> {
        self.inner.users().map_err(auth_err)
    }
}

#[pymodule]
#[pyo3(name = "biotouch")]
pub fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyAuthService>()?;
    m.add_function(wrap_pyfunction!(dtw_match, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_rows, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(sffs_select, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(select_functions, m)?)?;
    m.add("NUM_FUNCTIONS", features::NUM_FUNCTIONS)?;
    Ok(())
}
