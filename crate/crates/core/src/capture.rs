//! Stroke capture types, dataset ingestion and sample preprocessing.
//!
//! A sample file holds one finger-drawn digit: a header line with the point
//! count `P`, followed by `P` rows of `x y t`. Files are named
//! `<user>_<digit>_s<session>_r<repetition>.txt` and live in one directory
//! per user under the dataset root.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of points a usable sample must carry. The 5-sample
/// windows of the speed-ratio and length/width functions need it.
pub const MIN_POINTS: usize = 5;

/// Number of users in the development split of the full corpus.
pub const DEV_USERS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptureError {
    #[error("malformed sample file: {0}")]
    MalformedFile(String),
    #[error("sample too short: {got} points, need at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("time goes backwards at point {index}")]
    NonMonotonicTime { index: usize },
    #[error("invalid sample metadata: {0}")]
    InvalidMeta(String),
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate sample key {0}")]
    DuplicateKey(SampleKey),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CaptureError {
    fn io(path: &Path, err: std::io::Error) -> Self {
        CaptureError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchPoint {
    pub x: f64,
    pub y: f64,
    /// Milliseconds since the start of the sample.
    pub t: f64,
}

impl TouchPoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }
}

/// Identifies one sample in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub user_id: String,
    pub digit: u8,
    pub session: u8,
    pub repetition: u8,
}

impl SampleKey {
    pub fn new(user_id: impl Into<String>, digit: u8, session: u8, repetition: u8) -> Self {
        Self {
            user_id: user_id.into(),
            digit,
            session,
            repetition,
        }
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        if self.digit > 9 {
            return Err(CaptureError::InvalidMeta(format!("digit {} not in 0..=9", self.digit)));
        }
        if !(1..=2).contains(&self.session) {
            return Err(CaptureError::InvalidMeta(format!("session {} not in 1..=2", self.session)));
        }
        if !(1..=4).contains(&self.repetition) {
            return Err(CaptureError::InvalidMeta(format!(
                "repetition {} not in 1..=4",
                self.repetition
            )));
        }
        if self.user_id.is_empty() {
            return Err(CaptureError::InvalidMeta("empty user id".into()));
        }
        Ok(())
    }

    /// File name used by the on-disk layout.
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_s{}_r{}.txt",
            self.user_id, self.digit, self.session, self.repetition
        )
    }

    /// Parses `<user>_<digit>_s<session>_r<repetition>.txt`. The user id may
    /// itself contain underscores.
    pub fn from_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".txt")?;
        let mut parts = stem.rsplitn(4, '_');
        let rep = parts.next()?.strip_prefix('r')?.parse().ok()?;
        let session = parts.next()?.strip_prefix('s')?.parse().ok()?;
        let digit = parts.next()?.parse().ok()?;
        let user = parts.next()?;
        let key = SampleKey::new(user, digit, session, rep);
        key.validate().ok()?;
        Some(key)
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/s{}/r{}",
            self.user_id, self.digit, self.session, self.repetition
        )
    }
}

/// One finger-drawn digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitSample {
    pub key: SampleKey,
    points: Vec<TouchPoint>,
}

impl DigitSample {
    /// Validates the metadata and the point sequence. Consecutive points
    /// sharing a timestamp are collapsed, keeping the first.
    pub fn new(key: SampleKey, points: Vec<TouchPoint>) -> Result<Self, CaptureError> {
        Self::with_min_points(key, points, MIN_POINTS)
    }

    pub fn with_min_points(
        key: SampleKey,
        points: Vec<TouchPoint>,
        min_points: usize,
    ) -> Result<Self, CaptureError> {
        key.validate()?;
        let mut kept: Vec<TouchPoint> = Vec::with_capacity(points.len());
        for (index, p) in points.into_iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.t.is_finite()) {
                return Err(CaptureError::NonFinite { index });
            }
            if let Some(last) = kept.last() {
                if p.t < last.t {
                    return Err(CaptureError::NonMonotonicTime { index });
                }
                if p.t == last.t {
                    continue;
                }
            }
            kept.push(p);
        }
        if kept.len() < min_points {
            return Err(CaptureError::TooShort {
                got: kept.len(),
                min: min_points,
            });
        }
        Ok(Self { key, points: kept })
    }

    pub fn points(&self) -> &[TouchPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn digit(&self) -> u8 {
        self.key.digit
    }

    pub fn user_id(&self) -> &str {
        &self.key.user_id
    }

    /// Returns a copy relabelled under a different key.
    pub fn relabel(&self, key: SampleKey) -> Result<Self, CaptureError> {
        key.validate()?;
        Ok(Self {
            key,
            points: self.points.clone(),
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            key: self.key.clone(),
            points: self
                .points
                .iter()
                .map(|p| TouchPoint::new(p.x + dx, p.y + dy, p.t))
                .collect(),
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        (sx / n, sy / n)
    }

    /// Serializes into the per-sample text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.points.len());
        for p in &self.points {
            out.push_str(&format!("{} {} {}\n", p.x, p.y, p.t));
        }
        out
    }
}

/// Column layout of sample files, so the loader can follow releases whose
/// files differ from the default `x y t` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub x_column: usize,
    pub y_column: usize,
    pub t_column: usize,
    /// `None` splits on any whitespace.
    pub separator: Option<char>,
    /// Whether the first line holds the point count.
    pub has_header: bool,
    pub min_points: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            x_column: 0,
            y_column: 1,
            t_column: 2,
            separator: None,
            has_header: true,
            min_points: MIN_POINTS,
        }
    }
}

pub fn load_sample(bytes: &[u8], key: SampleKey) -> Result<DigitSample, CaptureError> {
    load_sample_with(bytes, key, &LoadOptions::default())
}

pub fn load_sample_with(
    bytes: &[u8],
    key: SampleKey,
    opts: &LoadOptions,
) -> Result<DigitSample, CaptureError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CaptureError::MalformedFile(format!("not utf-8: {e}")))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());

    let declared = if opts.has_header {
        let header = lines
            .next()
            .ok_or_else(|| CaptureError::MalformedFile("missing header".into()))?;
        let count: usize = header
            .trim()
            .parse()
            .map_err(|_| CaptureError::MalformedFile(format!("bad header {header:?}")))?;
        Some(count)
    } else {
        None
    };

    let needed = opts.x_column.max(opts.y_column).max(opts.t_column) + 1;
    let mut points = Vec::with_capacity(declared.unwrap_or(0));
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = match opts.separator {
            Some(sep) => line.split(sep).map(str::trim).collect(),
            None => line.split_whitespace().collect(),
        };
        if fields.len() < needed {
            return Err(CaptureError::MalformedFile(format!(
                "row {} has {} fields, need {}",
                row + 1,
                fields.len(),
                needed
            )));
        }
        let field = |col: usize| -> Result<f64, CaptureError> {
            fields[col].parse::<f64>().map_err(|_| {
                CaptureError::MalformedFile(format!("row {}: non-numeric {:?}", row + 1, fields[col]))
            })
        };
        points.push(TouchPoint::new(
            field(opts.x_column)?,
            field(opts.y_column)?,
            field(opts.t_column)?,
        ));
    }
    if let Some(count) = declared {
        if count != points.len() {
            return Err(CaptureError::MalformedFile(format!(
                "header declares {count} points, found {}",
                points.len()
            )));
        }
    }
    DigitSample::with_min_points(key, points, opts.min_points)
}

/// Centers the stroke on its centroid and rebases time to start at zero.
/// Samples that are already centered and rebased come back unchanged.
pub fn preprocess(sample: &DigitSample) -> DigitSample {
    let (cx, cy) = sample.centroid();
    let t0 = sample.points[0].t;
    let scale = sample
        .points
        .iter()
        .fold(1.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let centered = cx.abs() <= 1e-12 * scale && cy.abs() <= 1e-12 * scale;
    if centered && t0 == 0.0 {
        return sample.clone();
    }
    let (cx, cy) = if centered { (0.0, 0.0) } else { (cx, cy) };
    DigitSample {
        key: sample.key.clone(),
        points: sample
            .points
            .iter()
            .map(|p| TouchPoint::new(p.x - cx, p.y - cy, p.t - t0))
            .collect(),
    }
}

/// A collection of samples indexed by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: BTreeMap<SampleKey, DigitSample>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: impl IntoIterator<Item = DigitSample>) -> Result<Self, CaptureError> {
        let mut ds = Self::new();
        for s in samples {
            ds.insert(s)?;
        }
        Ok(ds)
    }

    pub fn insert(&mut self, sample: DigitSample) -> Result<(), CaptureError> {
        if self.samples.contains_key(&sample.key) {
            return Err(CaptureError::DuplicateKey(sample.key));
        }
        self.samples.insert(sample.key.clone(), sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, key: &SampleKey) -> Option<&DigitSample> {
        self.samples.get(key)
    }

    pub fn samples(&self) -> impl Iterator<Item = &DigitSample> {
        self.samples.values()
    }

    /// User ids in canonical (lexicographic) order.
    pub fn users(&self) -> Vec<String> {
        let mut users: Vec<String> = self.samples.keys().map(|k| k.user_id.clone()).collect();
        users.dedup();
        users
    }

    pub fn sample(&self, user: &str, digit: u8, session: u8, repetition: u8) -> Option<&DigitSample> {
        self.samples
            .get(&SampleKey::new(user, digit, session, repetition))
    }

    /// Samples of one user, digit and session ordered by repetition.
    pub fn session_samples(&self, user: &str, digit: u8, session: u8) -> Vec<&DigitSample> {
        (1..=4)
            .filter_map(|r| self.sample(user, digit, session, r))
            .collect()
    }

    pub fn restrict_users(&self, users: &[String]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|(k, _)| users.contains(&k.user_id))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Development split: the first `dev_users` users in canonical order;
    /// evaluation split: everyone else.
    pub fn split(&self, dev_users: usize) -> Split {
        let users = self.users();
        let cut = dev_users.min(users.len());
        Split {
            development: self.restrict_users(&users[..cut]),
            evaluation: self.restrict_users(&users[cut..]),
        }
    }

    pub fn map_samples(&self, f: impl Fn(&DigitSample) -> DigitSample) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub development: Dataset,
    pub evaluation: Dataset,
}

/// Result of walking a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn load_dataset(root: &Path) -> Result<LoadReport, CaptureError> {
    load_dataset_with(root, &LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<LoadReport, CaptureError> {
    let mut user_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CaptureError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    user_dirs.sort();

    let mut dataset = Dataset::new();
    let mut skipped = Vec::new();
    for dir in user_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CaptureError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for path in files {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(key) = SampleKey::from_file_name(name) else {
                skipped.push((path.clone(), "unrecognised file name".to_string()));
                continue;
            };
            let bytes = fs::read(&path).map_err(|e| CaptureError::io(&path, e))?;
            match load_sample_with(&bytes, key, opts) {
                Ok(sample) => dataset.insert(sample)?,
                Err(e) => skipped.push((path.clone(), e.to_string())),
            }
        }
    }
    if dataset.is_empty() {
        return Err(CaptureError::EmptyDataset);
    }
    Ok(LoadReport { dataset, skipped })
}

/// Writes the dataset in the directory layout [`load_dataset`] reads.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<(), CaptureError> {
    for sample in ds.samples() {
        let dir = root.join(&sample.key.user_id);
        fs::create_dir_all(&dir).map_err(|e| CaptureError::io(&dir, e))?;
        let path = dir.join(sample.key.file_name());
        let mut f = fs::File::create(&path).map_err(|e| CaptureError::io(&path, e))?;
        f.write_all(sample.to_text().as_bytes())
            .map_err(|e| CaptureError::io(&path, e))?;
    }
    Ok(())
}

/// UI interchange object for one captured digit. Field names are part of
/// the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub user: String,
    pub digit: u8,
    pub points: Vec<TouchPoint>,
}

impl CaptureRecord {
    pub fn into_sample(self, session: u8, repetition: u8) -> Result<DigitSample, CaptureError> {
        DigitSample::new(
            SampleKey::new(self.user, self.digit, session, repetition),
            self.points,
        )
    }

    pub fn from_sample(sample: &DigitSample) -> Self {
        Self {
            user: sample.key.user_id.clone(),
            digit: sample.key.digit,
            points: sample.points.clone(),
        }
    }
}
