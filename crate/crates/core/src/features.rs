//! The 21 time functions computed from a digit stroke.
//!
//! Channel numbering is 1-based and fixed:
//!
//! | #     | function                                   |
//! |-------|--------------------------------------------|
//! | 1, 2  | x, y                                       |
//! | 3     | path-tangent angle θ                       |
//! | 4     | path velocity magnitude v                  |
//! | 5     | log curvature radius ρ                     |
//! | 6     | total acceleration magnitude a             |
//! | 7–12  | first derivatives of 1–6                   |
//! | 13,14 | second derivatives of x, y                 |
//! | 15    | min/max speed ratio over 5 samples         |
//! | 16,17 | angle of consecutive samples α and α̇       |
//! | 18,19 | sin α, cos α                               |
//! | 20,21 | stroke length/width ratio, 5 and 7 samples |
//!
//! Derivatives are taken per sample index with a second-order regression
//! filter, not per elapsed millisecond.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{DigitSample, MIN_POINTS};

pub const NUM_FUNCTIONS: usize = 21;

/// Guard used in logs and ratios.
pub const EPS: f64 = 1e-8;

/// Channels whose standard deviation falls below this are zeroed by [`znorm`].
const STD_FLOOR: f64 = 1e-12;

pub const FUNCTION_NAMES: [&str; NUM_FUNCTIONS] = [
    "x", "y", "theta", "v", "rho", "a", "dx", "dy", "dtheta", "dv", "drho", "da", "ddx", "ddy",
    "v_ratio", "alpha", "dalpha", "sin", "cos", "r5", "r7",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("sequence too short: {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("function matrix is already normalized")]
    AlreadyNormalized,
    #[error("function subset is empty")]
    EmptySubset,
    #[error("function index {0} outside 1..=21")]
    BadIndex(usize),
    #[error("frame length mismatch")]
    Shape,
}

/// Per-point values of all 21 functions for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMatrix {
    frames: Vec<[f64; NUM_FUNCTIONS]>,
    normalized: bool,
}

impl FunctionMatrix {
    pub fn from_frames(frames: Vec<[f64; NUM_FUNCTIONS]>, normalized: bool) -> Self {
        Self { frames, normalized }
    }

    /// Builds a matrix from 21 channels of equal length.
    pub fn from_channels(channels: &[Vec<f64>], normalized: bool) -> Result<Self, FeatureError> {
        if channels.len() != NUM_FUNCTIONS {
            return Err(FeatureError::Shape);
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(FeatureError::Shape);
        }
        let frames = (0..n)
            .map(|i| std::array::from_fn(|k| channels[k][i]))
            .collect();
        Ok(Self { frames, normalized })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn frames(&self) -> &[[f64; NUM_FUNCTIONS]] {
        &self.frames
    }

    /// Channel by 1-based function number.
    pub fn channel(&self, function: usize) -> Vec<f64> {
        assert!((1..=NUM_FUNCTIONS).contains(&function), "function {function} out of range");
        self.frames.iter().map(|f| f[function - 1]).collect()
    }

    /// Debug dump: one row per point, index plus 21 channels.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "index")?;
        for name in FUNCTION_NAMES {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for (i, frame) in self.frames.iter().enumerate() {
            write!(w, "{i}")?;
            for v in frame {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A non-empty set of 1-based function numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FunctionSubset(u32);

impl FunctionSubset {
    pub fn new(functions: &[usize]) -> Result<Self, FeatureError> {
        let mut mask = 0u32;
        for &f in functions {
            if !(1..=NUM_FUNCTIONS).contains(&f) {
                return Err(FeatureError::BadIndex(f));
            }
            mask |= 1 << (f - 1);
        }
        if mask == 0 {
            return Err(FeatureError::EmptySubset);
        }
        Ok(Self(mask))
    }

    pub fn all() -> Self {
        Self((1 << NUM_FUNCTIONS) - 1)
    }

    /// x, y and their first and second derivatives.
    pub fn baseline() -> Self {
        Self::new(&[1, 2, 7, 8, 13, 14]).expect("static subset")
    }

    pub fn contains(&self, function: usize) -> bool {
        (1..=NUM_FUNCTIONS).contains(&function) && self.0 & (1 << (function - 1)) != 0
    }

    pub fn functions(&self) -> Vec<usize> {
        (1..=NUM_FUNCTIONS).filter(|&f| self.contains(f)).collect()
    }

    /// Zero-based channel offsets, for indexing frames.
    pub fn offsets(&self) -> Vec<usize> {
        (0..NUM_FUNCTIONS).filter(|&k| self.0 & (1 << k) != 0).collect()
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_subset_of(&self, other: &FunctionSubset) -> bool {
        self.0 & !other.0 == 0
    }
}

impl TryFrom<Vec<usize>> for FunctionSubset {
    type Error = FeatureError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        FunctionSubset::new(&v)
    }
}

impl From<FunctionSubset> for Vec<usize> {
    fn from(s: FunctionSubset) -> Self {
        s.functions()
    }
}

impl fmt::Display for FunctionSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.functions().iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Regression delta over ±2 samples with edge padding:
/// `d[n] = ((s[n+1] - s[n-1]) + 2 (s[n+2] - s[n-2])) / 10`.
pub fn derivative(seq: &[f64]) -> Result<Vec<f64>, FeatureError> {
    if seq.len() < MIN_POINTS {
        return Err(FeatureError::TooShort {
            got: seq.len(),
            min: MIN_POINTS,
        });
    }
    Ok(delta(seq))
}

fn delta(seq: &[f64]) -> Vec<f64> {
    let n = seq.len() as isize;
    let at = |i: isize| seq[i.clamp(0, n - 1) as usize];
    (0..n)
        .map(|i| ((at(i + 1) - at(i - 1)) + 2.0 * (at(i + 2) - at(i - 2))) / 10.0)
        .collect()
}

/// Removes 2π jumps so angle derivatives stay continuous.
fn unwrap_angles(angles: &[f64]) -> Vec<f64> {
    use std::f64::consts::{PI, TAU};
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = 0.0;
    for (i, &a) in angles.iter().enumerate() {
        if i > 0 {
            let step = a - angles[i - 1];
            if step > PI {
                offset -= TAU;
            } else if step < -PI {
                offset += TAU;
            }
        }
        out.push(a + offset);
    }
    out
}

fn window(n: usize, center: usize, half: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(n - 1))
}

fn length_width_ratio(x: &[f64], y: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let (lo, hi) = window(n, i, half);
            let path: f64 = (lo..hi)
                .map(|k| (x[k + 1] - x[k]).hypot(y[k + 1] - y[k]))
                .sum();
            let (min_x, max_x) = x[lo..=hi]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            path / (max_x - min_x + EPS)
        })
        .collect()
}

/// Computes all 21 functions. Expects a preprocessed sample; the result is
/// not normalized.
pub fn extract(sample: &DigitSample) -> Result<FunctionMatrix, FeatureError> {
    let pts = sample.points();
    let n = pts.len();
    if n < MIN_POINTS {
        return Err(FeatureError::TooShort { got: n, min: MIN_POINTS });
    }
    let x: Vec<f64> = pts.iter().map(|p| p.x).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.y).collect();

    let dx = delta(&x);
    let dy = delta(&y);
    let theta: Vec<f64> = dx.iter().zip(&dy).map(|(&a, &b)| b.atan2(a)).collect();
    let v: Vec<f64> = dx.iter().zip(&dy).map(|(&a, &b)| a.hypot(b)).collect();
    let dtheta = delta(&unwrap_angles(&theta));
    let rho: Vec<f64> = v
        .iter()
        .zip(&dtheta)
        .map(|(&v, &dt)| (v.max(EPS) / (dt.abs() + EPS)).ln())
        .collect();
    let dv = delta(&v);
    let acc: Vec<f64> = (0..n)
        .map(|i| dv[i].hypot(v[i] * dtheta[i]))
        .collect();
    let drho = delta(&rho);
    let dacc = delta(&acc);
    let ddx = delta(&dx);
    let ddy = delta(&dy);

    let v_ratio: Vec<f64> = (0..n)
        .map(|i| {
            let (lo, hi) = window(n, i, 2);
            let w = &v[lo..=hi];
            let min = w.iter().copied().fold(f64::INFINITY, f64::min);
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            min / max.max(EPS)
        })
        .collect();

    let mut alpha: Vec<f64> = (0..n - 1)
        .map(|i| (y[i + 1] - y[i]).atan2(x[i + 1] - x[i]))
        .collect();
    alpha.push(alpha[n - 2]);
    let dalpha = delta(&unwrap_angles(&alpha));
    let sin: Vec<f64> = alpha.iter().map(|a| a.sin()).collect();
    let cos: Vec<f64> = alpha.iter().map(|a| a.cos()).collect();

    let r5 = length_width_ratio(&x, &y, 2);
    let r7 = length_width_ratio(&x, &y, 3);

    let channels = [
        &x, &y, &theta, &v, &rho, &acc, &dx, &dy, &dtheta, &dv, &drho, &dacc, &ddx, &ddy,
        &v_ratio, &alpha, &dalpha, &sin, &cos, &r5, &r7,
    ];
    let frames = (0..n)
        .map(|i| std::array::from_fn(|k| channels[k][i]))
        .collect();
    Ok(FunctionMatrix {
        frames,
        normalized: false,
    })
}

/// Per-sample standardization of every channel to zero mean and unit
/// population standard deviation. Constant channels become zeros.
pub fn znorm(m: &FunctionMatrix) -> Result<FunctionMatrix, FeatureError> {
    if m.normalized {
        return Err(FeatureError::AlreadyNormalized);
    }
    let n = m.frames.len() as f64;
    let mut frames = m.frames.clone();
    for k in 0..NUM_FUNCTIONS {
        let mean = m.frames.iter().map(|f| f[k]).sum::<f64>() / n;
        let var = m.frames.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for f in frames.iter_mut() {
            f[k] = if std < STD_FLOOR { 0.0 } else { (f[k] - mean) / std };
        }
    }
    Ok(FunctionMatrix {
        frames,
        normalized: true,
    })
}

/// preprocess → extract → znorm.
pub fn sample_features(sample: &DigitSample) -> Result<FunctionMatrix, FeatureError> {
    znorm(&extract(&crate::capture::preprocess(sample))?)
}
