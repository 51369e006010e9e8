//! Verification protocol, error-rate metrics and password search.
//!
//! Score pools follow an imitation-attack protocol: a user's template is
//! built from the first `n_enrol` session-1 samples of a digit, genuine
//! probes are the user's four session-2 samples, and each other user attacks
//! with their own first session-2 sample of the same digit.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::FeatureBank;
use crate::capture::Dataset;
use crate::dtw::{score_against_refs, DtwError};
use crate::features::{FunctionMatrix, FunctionSubset};
use crate::rnn::{forward_pair, NetworkParams, RnnError};
use crate::sffs::{sffs_select, SelectionTrace, SffsConfig, SffsError};

/// Session-2 samples per user and digit used as probes.
pub const PROBE_REPS: usize = 4;

/// Longest password the search handles.
pub const MAX_PASSWORD_LEN: usize = 8;

/// Passwords shorter than this are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 6;

/// Cap on how often a digit may repeat within a password.
pub const MAX_MULTIPLICITY: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("score pool is empty")]
    EmptyPool,
    #[error("nothing to fuse")]
    Empty,
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("password length {0} outside 1..=8")]
    BadLength(usize),
    #[error("exhaustive search is limited to passwords shorter than 6 digits, got {0}")]
    ModeMismatch(usize),
    #[error("enrolment size {0} outside 1..=4")]
    BadEnrolment(usize),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Sffs(#[from] SffsError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor }
    }

    /// Concatenates several pools.
    pub fn merge<'a>(sets: impl IntoIterator<Item = &'a ScoreSet>) -> ScoreSet {
        let mut out = ScoreSet::default();
        for s in sets {
            out.genuine.extend_from_slice(&s.genuine);
            out.impostor.extend_from_slice(&s.impostor);
        }
        out
    }

    /// (FAR, FRR) at `threshold`: impostors at or above it are accepted,
    /// genuine scores below it are rejected.
    pub fn rates_at(&self, threshold: f64) -> (f64, f64) {
        let fa = self.impostor.iter().filter(|&&s| s >= threshold).count();
        let fr = self.genuine.iter().filter(|&&s| s < threshold).count();
        (
            fa as f64 / self.impostor.len() as f64,
            fr as f64 / self.genuine.len() as f64,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
}

/// FAR/FRR at every distinct score, thresholds ascending.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<DetPoint>, EvalError> {
    if s.genuine.is_empty() || s.impostor.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut gen = s.genuine.clone();
    let mut imp = s.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let fr = gen.partition_point(|&g| g < t);
            let fa = imp.len() - imp.partition_point(|&i| i < t);
            DetPoint {
                threshold: t,
                far: fa as f64 / ni,
                frr: fr as f64 / ng,
            }
        })
        .collect())
}

/// Picks the point minimizing |FAR − FRR|, lowest threshold on ties.
pub fn eer_point(det: &[DetPoint]) -> Option<(usize, Eer)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in det.iter().enumerate() {
        let gap = (p.far - p.frr).abs();
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((i, gap));
        }
    }
    best.map(|(i, _)| {
        let p = det[i];
        (
            i,
            Eer {
                eer: 100.0 * (p.far + p.frr) / 2.0,
                threshold: p.threshold,
            },
        )
    })
}

/// Equal error rate in percent, taken as the FAR/FRR midpoint at the
/// threshold where they are closest.
pub fn compute_eer(s: &ScoreSet) -> Result<Eer, EvalError> {
    let det = det_curve(s)?;
    Ok(eer_point(&det).expect("non-empty curve").1)
}

/// Arithmetic mean; summed in sorted order so any permutation of the input
/// gives the identical value.
pub fn fuse(scores: &[f64]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores a probe against enrolment samples of a given digit.
pub trait Scorer: Sync {
    fn score(&self, digit: u8, enrolment: &[&FunctionMatrix], probe: &FunctionMatrix) -> Result<f64, EvalError>;
}

/// DTW with one function subset per digit.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwScorer {
    pub subsets: [FunctionSubset; 10],
}

impl DtwScorer {
    pub fn baseline() -> Self {
        Self {
            subsets: [FunctionSubset::baseline(); 10],
        }
    }

    pub fn uniform(subset: FunctionSubset) -> Self {
        Self { subsets: [subset; 10] }
    }

    pub fn adapted(subsets: &DigitSubsets) -> Self {
        let mut s = Self::baseline();
        for (&d, &sub) in &subsets.0 {
            if (d as usize) < 10 {
                s.subsets[d as usize] = sub;
            }
        }
        s
    }
}

impl Scorer for DtwScorer {
    fn score(&self, digit: u8, enrolment: &[&FunctionMatrix], probe: &FunctionMatrix) -> Result<f64, EvalError> {
        Ok(score_against_refs(
            enrolment.iter().copied(),
            probe,
            &self.subsets[digit as usize],
        )?)
    }
}

/// Siamese BLSTM; N-vs-1 scores average the pair scores.
#[derive(Debug, Clone)]
pub struct BlstmScorer {
    pub params: NetworkParams,
}

impl Scorer for BlstmScorer {
    fn score(&self, _digit: u8, enrolment: &[&FunctionMatrix], probe: &FunctionMatrix) -> Result<f64, EvalError> {
        let scores = enrolment
            .iter()
            .map(|e| forward_pair(&self.params, e, probe))
            .collect::<Result<Vec<f64>, _>>()?;
        fuse(&scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    DtwBaseline,
    DtwAdapted,
    Blstm,
}

impl std::str::FromStr for SystemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dtw-baseline" => Ok(Self::DtwBaseline),
            "dtw-adapted" => Ok(Self::DtwAdapted),
            "blstm" => Ok(Self::Blstm),
            other => Err(format!("unknown system {other:?}")),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DtwBaseline => "dtw-baseline",
            Self::DtwAdapted => "dtw-adapted",
            Self::Blstm => "blstm",
        })
    }
}

/// Per-digit function subsets chosen by the floating search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DigitSubsets(pub BTreeMap<u8, FunctionSubset>);

/// Dataset plus its extracted features.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub dataset: Dataset,
    pub bank: FeatureBank,
}

impl EvalData {
    pub fn new(dataset: Dataset) -> Self {
        let bank = FeatureBank::build(&dataset);
        Self { dataset, bank }
    }

    fn matrix(&self, user: &str, digit: u8, session: u8, rep: u8) -> Result<&FunctionMatrix, EvalError> {
        self.bank.lookup(user, digit, session, rep).ok_or_else(|| {
            EvalError::MissingData(format!("{user} digit {digit} session {session} repetition {rep}"))
        })
    }
}

/// Which probe repetitions are scored for impostor entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeScope {
    /// First session-2 repetition only, as the single-digit protocol needs.
    Table,
    /// Every session-2 repetition, needed for passwords with repeated digits.
    Full,
}

/// Scores of every user's template against every user's session-2 probes
/// for one digit, indexed `[template owner][probe writer][repetition]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCube {
    pub digit: u8,
    pub n_enrol: usize,
    pub users: Vec<String>,
    scores: Vec<f64>,
}

impl ScoreCube {
    pub fn from_fn(digit: u8, n_enrol: usize, users: Vec<String>, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let n = users.len();
        let mut scores = Vec::with_capacity(n * n * PROBE_REPS);
        for u in 0..n {
            for v in 0..n {
                for r in 0..PROBE_REPS {
                    scores.push(f(u, v, r));
                }
            }
        }
        Self {
            digit,
            n_enrol,
            users,
            scores,
        }
    }

    pub fn get(&self, owner: usize, writer: usize, rep: usize) -> f64 {
        let n = self.users.len();
        self.scores[(owner * n + writer) * PROBE_REPS + rep]
    }

    /// Single-digit pools: all genuine repetitions, first-repetition impostors.
    pub fn score_set(&self) -> ScoreSet {
        let n = self.users.len();
        let mut set = ScoreSet::default();
        for u in 0..n {
            for r in 0..PROBE_REPS {
                set.genuine.push(self.get(u, u, r));
            }
            for v in (0..n).filter(|&v| v != u) {
                set.impostor.push(self.get(u, v, 0));
            }
        }
        set
    }
}

pub fn build_cube(
    data: &EvalData,
    scorer: &dyn Scorer,
    digit: u8,
    n_enrol: usize,
    scope: CubeScope,
) -> Result<ScoreCube, EvalError> {
    if !(1..=4).contains(&n_enrol) {
        return Err(EvalError::BadEnrolment(n_enrol));
    }
    let users = data.dataset.users();
    if users.is_empty() {
        return Err(EvalError::MissingData("no users".into()));
    }
    let templates: Vec<Vec<&FunctionMatrix>> = users
        .iter()
        .map(|u| {
            (1..=n_enrol as u8)
                .map(|r| data.matrix(u, digit, 1, r))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let probes: Vec<Vec<&FunctionMatrix>> = users
        .iter()
        .map(|u| {
            (1..=PROBE_REPS as u8)
                .map(|r| data.matrix(u, digit, 2, r))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let n = users.len();
    let cells: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|u| (0..n).flat_map(move |v| (0..PROBE_REPS).map(move |r| (u, v, r))))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(u, v, r)| {
            let needed = u == v || r == 0 || scope == CubeScope::Full;
            if needed {
                scorer.score(digit, &templates[u], probes[v][r])
            } else {
                Ok(f64::NAN)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(ScoreCube {
        digit,
        n_enrol,
        users,
        scores: values,
    })
}

/// Genuine and impostor pools for one digit.
pub fn build_score_pools(
    data: &EvalData,
    scorer: &dyn Scorer,
    digit: u8,
    n_enrol: usize,
) -> Result<ScoreSet, EvalError> {
    Ok(build_cube(data, scorer, digit, n_enrol, CubeScope::Table)?.score_set())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitEer {
    pub digit: u8,
    pub eer: f64,
    pub threshold: f64,
    pub genuine: usize,
    pub impostor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasswordCell {
    pub n_enrol: usize,
    pub length: usize,
    pub eer: f64,
    pub digits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisetEer {
    pub digits: Vec<u8>,
    pub eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: SystemKind,
    pub n_enrol: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsets: Option<Vec<FunctionSubset>>,
    pub per_digit_eer: Vec<DigitEer>,
    /// DET curve of all evaluated digits pooled together.
    pub det_points: Vec<DetPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password_results: Option<Vec<PasswordCell>>,
    /// EER of every password multiset of one length, for band filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiset_eers: Option<Vec<MultisetEer>>,
}

impl EvalReport {
    pub fn mean_eer(&self) -> f64 {
        self.per_digit_eer.iter().map(|d| d.eer).sum::<f64>() / self.per_digit_eer.len().max(1) as f64
    }

    pub fn eer_of(&self, digit: u8) -> Option<f64> {
        self.per_digit_eer.iter().find(|d| d.digit == digit).map(|d| d.eer)
    }

    pub fn write_digit_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "system,n_enrol,digit,eer,threshold,genuine,impostor")?;
        for d in &self.per_digit_eer {
            writeln!(
                w,
                "{},{},{},{:.4},{},{},{}",
                self.system, self.n_enrol, d.digit, d.eer, d.threshold, d.genuine, d.impostor
            )?;
        }
        Ok(())
    }

    pub fn write_password_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n_enrol,length,eer,digits")?;
        for c in self.password_results.iter().flatten() {
            let digits: Vec<String> = c.digits.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{},{},{:.4},{}", c.n_enrol, c.length, c.eer, digits.join(" "))?;
        }
        Ok(())
    }
}

/// Per-digit EERs for the requested digits.
pub fn run_digit_table(
    data: &EvalData,
    system: SystemKind,
    scorer: &dyn Scorer,
    n_enrol: usize,
    digits: &[u8],
) -> Result<EvalReport, EvalError> {
    let mut per_digit = Vec::new();
    let mut pools = Vec::new();
    for &digit in digits {
        let set = build_score_pools(data, scorer, digit, n_enrol)?;
        let eer = compute_eer(&set)?;
        per_digit.push(DigitEer {
            digit,
            eer: eer.eer,
            threshold: eer.threshold,
            genuine: set.genuine.len(),
            impostor: set.impostor.len(),
        });
        pools.push(set);
    }
    let det_points = det_curve(&ScoreSet::merge(&pools))?;
    Ok(EvalReport {
        system,
        n_enrol,
        subsets: None,
        per_digit_eer: per_digit,
        det_points,
        password_results: None,
        multiset_eers: None,
    })
}

/// Full score cubes for all ten digits at one enrolment size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasswordPools {
    pub n_enrol: usize,
    pub cubes: Vec<ScoreCube>,
}

impl PasswordPools {
    pub fn build(data: &EvalData, scorer: &dyn Scorer, n_enrol: usize) -> Result<Self, EvalError> {
        let cubes = (0..10u8)
            .map(|d| build_cube(data, scorer, d, n_enrol, CubeScope::Full))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { n_enrol, cubes })
    }

    /// Digit pools fused over a password multiset. Genuine attempt `j` uses
    /// session-2 repetition `(j + k) mod 4` for the k-th occurrence of a
    /// digit; an attacker's k-th occurrence uses their k-th repetition.
    pub fn fused(&self, digits: &[u8]) -> Result<ScoreSet, EvalError> {
        if digits.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut occurrences: Vec<(usize, usize)> = Vec::new();
        let mut seen = [0usize; 10];
        for &d in digits {
            let d = d as usize;
            if d >= self.cubes.len() {
                return Err(EvalError::MissingData(format!("digit {d}")));
            }
            if seen[d] >= MAX_MULTIPLICITY {
                return Err(EvalError::MissingData(format!(
                    "digit {d} repeated more than {MAX_MULTIPLICITY} times"
                )));
            }
            occurrences.push((d, seen[d]));
            seen[d] += 1;
        }
        let n = self.cubes[0].users.len();
        let mut set = ScoreSet::default();
        let mut buf = Vec::with_capacity(occurrences.len());
        for u in 0..n {
            for j in 0..PROBE_REPS {
                buf.clear();
                buf.extend(
                    occurrences
                        .iter()
                        .map(|&(d, k)| self.cubes[d].get(u, u, (j + k) % PROBE_REPS)),
                );
                set.genuine.push(fuse(&buf)?);
            }
            for v in (0..n).filter(|&v| v != u) {
                buf.clear();
                buf.extend(occurrences.iter().map(|&(d, k)| self.cubes[d].get(u, v, k)));
                set.impostor.push(fuse(&buf)?);
            }
        }
        Ok(set)
    }

    pub fn multiset_eer(&self, digits: &[u8]) -> Result<f64, EvalError> {
        Ok(compute_eer(&self.fused(digits)?)?.eer)
    }
}

/// All non-decreasing digit sequences of `length` with per-digit
/// multiplicity at most `max_mult`, in lexicographic order.
pub fn enumerate_multisets(length: usize, max_mult: usize) -> Vec<Vec<u8>> {
    fn rec(start: u8, left: usize, max_mult: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for d in start..10 {
            let count = cur.iter().filter(|&&c| c == d).count();
            if count >= max_mult {
                continue;
            }
            cur.push(d);
            rec(d, left - 1, max_mult, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, length, max_mult, &mut Vec::new(), &mut out);
    out
}

/// Number of distinct orderings of a multiset.
pub fn permutations_of(digits: &[u8]) -> u128 {
    let mut counts = [0u32; 10];
    for &d in digits {
        counts[d as usize] += 1;
    }
    let fact = |n: u32| (1..=n as u128).product::<u128>();
    counts.iter().fold(fact(digits.len() as u32), |acc, &c| acc / fact(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Exhaustive,
    Sffs,
}

impl std::str::FromStr for SearchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exhaustive" => Ok(Self::Exhaustive),
            "sffs" => Ok(Self::Sffs),
            other => Err(format!("unknown search mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasswordResult {
    pub digits: Vec<u8>,
    pub eer: f64,
    pub evaluated: usize,
}

/// Pseudo-candidate id for the `k`-th occurrence of digit `d`.
fn occurrence_id(d: u8, k: usize) -> usize {
    d as usize * MAX_MULTIPLICITY + k
}

fn multiset_from_ids(ids: &[usize]) -> Vec<u8> {
    let mut digits: Vec<u8> = ids.iter().map(|&i| (i / MAX_MULTIPLICITY) as u8).collect();
    digits.sort_unstable();
    digits
}

/// Best-EER password multiset of exactly `length` digits. Ties go to the
/// lexicographically smallest multiset.
pub fn search_passwords(pools: &PasswordPools, length: usize, mode: SearchMode) -> Result<PasswordResult, EvalError> {
    if !(1..=MAX_PASSWORD_LEN).contains(&length) {
        return Err(EvalError::BadLength(length));
    }
    match mode {
        SearchMode::Exhaustive => {
            if length >= EXHAUSTIVE_LIMIT {
                return Err(EvalError::ModeMismatch(length));
            }
            let candidates = enumerate_multisets(length, MAX_MULTIPLICITY);
            let eers = candidates
                .par_iter()
                .map(|m| pools.multiset_eer(m))
                .collect::<Result<Vec<f64>, _>>()?;
            let (i, eer) = eers
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, be), (i, &e)| if e < be { (i, e) } else { (bi, be) });
            Ok(PasswordResult {
                digits: candidates[i].clone(),
                eer,
                evaluated: candidates.len(),
            })
        }
        SearchMode::Sffs => {
            let ids: Vec<usize> = (0..10u8)
                .flat_map(|d| (0..MAX_MULTIPLICITY).map(move |k| occurrence_id(d, k)))
                .collect();
            let cache = std::sync::Mutex::new(BTreeMap::<Vec<u8>, f64>::new());
            let objective = |subset: &[usize]| {
                let m = multiset_from_ids(subset);
                if let Some(&v) = cache.lock().expect("cache").get(&m) {
                    return v;
                }
                let v = pools.multiset_eer(&m).unwrap_or(f64::NAN);
                cache.lock().expect("cache").insert(m, v);
                v
            };
            let mut cfg = SffsConfig::new(length);
            cfg.parallel = true;
            let trace = sffs_select(&ids, objective, &cfg)?;
            let best = trace
                .best_of_size(length)
                .ok_or(EvalError::BadLength(length))?;
            let evaluated = cache.lock().expect("cache").len();
            Ok(PasswordResult {
                digits: multiset_from_ids(&best.subset),
                eer: best.objective,
                evaluated,
            })
        }
    }
}

/// Best passwords for every (enrolment size, length) cell. Lengths below 6
/// are searched exhaustively, longer ones with the floating search.
pub fn password_table(pools: &[PasswordPools], lengths: &[usize]) -> Result<Vec<PasswordCell>, EvalError> {
    let mut cells = Vec::new();
    for p in pools {
        for &length in lengths {
            let mode = if length < EXHAUSTIVE_LIMIT {
                SearchMode::Exhaustive
            } else {
                SearchMode::Sffs
            };
            let r = search_passwords(p, length, mode)?;
            cells.push(PasswordCell {
                n_enrol: p.n_enrol,
                length,
                eer: r.eer,
                digits: r.digits,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinDistribution {
    pub length: usize,
    pub multisets: Vec<MultisetEer>,
    /// Quartiles over all ordered passwords (each multiset weighted by its
    /// number of orderings).
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    /// Multisets outside the 1.5 IQR whiskers.
    pub outliers: Vec<MultisetEer>,
}

impl PinDistribution {
    /// (multisets, ordered passwords) with EER in `[lo, hi]`.
    pub fn count_in_band(&self, lo: f64, hi: f64) -> (usize, u128) {
        self.multisets
            .iter()
            .filter(|m| m.eer >= lo && m.eer <= hi)
            .fold((0, 0), |(n, p), m| (n + 1, p + permutations_of(&m.digits)))
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// EER distribution over every password of `length` digits.
pub fn pin_distribution(pools: &PasswordPools, length: usize) -> Result<PinDistribution, EvalError> {
    if !(1..=MAX_PASSWORD_LEN).contains(&length) {
        return Err(EvalError::BadLength(length));
    }
    let candidates = enumerate_multisets(length, MAX_MULTIPLICITY);
    let eers = candidates
        .par_iter()
        .map(|m| pools.multiset_eer(m))
        .collect::<Result<Vec<f64>, _>>()?;
    let multisets: Vec<MultisetEer> = candidates
        .into_iter()
        .zip(eers)
        .map(|(digits, eer)| MultisetEer { digits, eer })
        .collect();
    let mut expanded: Vec<f64> = Vec::new();
    for m in &multisets {
        let reps = permutations_of(&m.digits) as usize;
        expanded.extend(std::iter::repeat_n(m.eer, reps));
    }
    expanded.sort_by(f64::total_cmp);
    let q1 = quantile(&expanded, 0.25);
    let q3 = quantile(&expanded, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = expanded
        .iter()
        .copied()
        .filter(|&e| e >= fence_lo && e <= fence_hi)
        .collect();
    let outliers = multisets
        .iter()
        .filter(|m| m.eer < fence_lo || m.eer > fence_hi)
        .cloned()
        .collect();
    Ok(PinDistribution {
        length,
        min: expanded[0],
        q1,
        median: quantile(&expanded, 0.5),
        q3,
        max: *expanded.last().expect("non-empty"),
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers,
        multisets,
    })
}

/// Floating search over the 21 functions for one digit, minimizing the EER
/// of that digit's pools on `dev`.
pub fn select_functions(
    dev: &EvalData,
    digit: u8,
    n_enrol: usize,
    max_size: usize,
) -> Result<SelectionTrace, EvalError> {
    let failure = std::sync::Mutex::new(None::<EvalError>);
    let objective = |functions: &[usize]| -> f64 {
        let subset = match FunctionSubset::new(functions) {
            Ok(s) => s,
            Err(_) => return f64::NAN,
        };
        let scorer = DtwScorer::uniform(subset);
        match build_score_pools(dev, &scorer, digit, n_enrol).and_then(|s| compute_eer(&s)) {
            Ok(e) => e.eer,
            Err(e) => {
                failure.lock().expect("failure slot").get_or_insert(e);
                f64::NAN
            }
        }
    };
    let candidates: Vec<usize> = (1..=crate::features::NUM_FUNCTIONS).collect();
    let result = sffs_select(&candidates, objective, &SffsConfig::new(max_size));
    if let Some(e) = failure.into_inner().expect("failure slot") {
        return Err(e);
    }
    Ok(result?)
}

/// Runs [`select_functions`] for every digit.
pub fn select_all_digits(dev: &EvalData, n_enrol: usize, max_size: usize) -> Result<(DigitSubsets, Vec<SelectionTrace>), EvalError> {
    let mut subsets = DigitSubsets::default();
    let mut traces = Vec::new();
    for digit in 0..10u8 {
        let trace = select_functions(dev, digit, n_enrol, max_size)?;
        let subset = FunctionSubset::new(&trace.best_subset).map_err(|_| EvalError::Empty)?;
        subsets.0.insert(digit, subset);
        traces.push(trace);
    }
    Ok((subsets, traces))
}

/// How often each function appears across per-digit selections, indexed by
/// function number minus one.
pub fn selection_histogram(subsets: &DigitSubsets) -> [usize; crate::features::NUM_FUNCTIONS] {
    let mut hist = [0usize; crate::features::NUM_FUNCTIONS];
    for s in subsets.0.values() {
        for f in s.functions() {
            hist[f - 1] += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let e = compute_eer(&ScoreSet::new(vec![0.9; 5], vec![0.1; 7])).unwrap();
        assert_eq!(e.eer, 0.0);
        assert_eq!(e.threshold, 0.9);
    }

    #[test]
    fn identical_pools_give_fifty() {
        let pool = vec![0.3, 0.5, 0.7, 0.2];
        let e = compute_eer(&ScoreSet::new(pool.clone(), pool)).unwrap();
        assert_eq!(e.eer, 50.0);
    }

    #[test]
    fn interleaved_pools() {
        // Sweep over {.3,.4,.5,.6,.7,.8}: FAR and FRR meet at 1/3 for θ = 0.6.
        let e = compute_eer(&ScoreSet::new(vec![0.8, 0.6, 0.4], vec![0.7, 0.5, 0.3])).unwrap();
        assert!((e.eer - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.threshold, 0.6);
    }

    #[test]
    fn empty_pool_is_error() {
        assert_eq!(compute_eer(&ScoreSet::new(vec![], vec![0.1])), Err(EvalError::EmptyPool));
        assert_eq!(compute_eer(&ScoreSet::new(vec![0.1], vec![])), Err(EvalError::EmptyPool));
    }

    #[test]
    fn fuse_mean() {
        assert_eq!(fuse(&[0.5]).unwrap(), 0.5);
        assert_eq!(fuse(&[0.2, 0.8]).unwrap(), 0.5);
        assert_eq!(fuse(&[0.1, 0.7, 0.35]).unwrap(), fuse(&[0.35, 0.1, 0.7]).unwrap());
        assert_eq!(fuse(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn multiset_counts() {
        assert_eq!(enumerate_multisets(2, 4).len(), 55);
        assert_eq!(enumerate_multisets(4, 4).len(), 715);
        // C(14,5) minus the ten five-of-a-kind multisets.
        assert_eq!(enumerate_multisets(5, 4).len(), 2002 - 10);
        assert_eq!(permutations_of(&[1, 2, 3, 4]), 24);
        assert_eq!(permutations_of(&[1, 1, 2, 2]), 6);
        let total: u128 = enumerate_multisets(4, 4).iter().map(|m| permutations_of(m)).sum();
        assert_eq!(total, 10_000);
    }

    fn cube(digit: u8, users: usize, f: impl Fn(usize, usize, usize) -> f64) -> ScoreCube {
        ScoreCube::from_fn(digit, 1, (0..users).map(|u| format!("u{u}")).collect(), f)
    }

    fn separable_pools(users: usize) -> PasswordPools {
        PasswordPools {
            n_enrol: 3,
            cubes: (0..10)
                .map(|d| cube(d, users, |u, v, _| if u == v { 0.9 } else { 0.1 }))
                .collect(),
        }
    }

    #[test]
    fn cube_pool_sizes() {
        let c = cube(0, 2, |u, v, r| (u * 100 + v * 10 + r) as f64);
        let s = c.score_set();
        assert_eq!(s.genuine.len(), 8);
        assert_eq!(s.impostor.len(), 2);
        assert_eq!(s.impostor, vec![10.0, 100.0]);
    }

    #[test]
    fn search_rejects_bad_arguments() {
        let p = separable_pools(3);
        assert_eq!(search_passwords(&p, 0, SearchMode::Sffs), Err(EvalError::BadLength(0)));
        assert_eq!(search_passwords(&p, 9, SearchMode::Sffs), Err(EvalError::BadLength(9)));
        assert_eq!(
            search_passwords(&p, 6, SearchMode::Exhaustive),
            Err(EvalError::ModeMismatch(6))
        );
    }

    #[test]
    fn degenerate_pin_distribution() {
        let d = pin_distribution(&separable_pools(3), 4).unwrap();
        assert_eq!((d.q1, d.median, d.q3), (0.0, 0.0, 0.0));
        assert_eq!(d.multisets.len(), 715);
        assert_eq!(d.count_in_band(0.0, 10.0), (715, 10_000));
    }

    #[test]
    fn exhaustive_search_picks_best_digit() {
        // Digit 5 is the only one where genuine beats impostor.
        let pools = PasswordPools {
            n_enrol: 1,
            cubes: (0..10u8)
                .map(|d| {
                    cube(d, 4, move |u, v, r| {
                        if d == 5 {
                            if u == v { 0.9 } else { 0.1 }
                        } else {
                            ((u * 7 + v * 3 + r) % 5) as f64 / 5.0
                        }
                    })
                })
                .collect(),
        };
        let r = search_passwords(&pools, 1, SearchMode::Exhaustive).unwrap();
        assert_eq!(r.digits, vec![5]);
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.evaluated, 10);
    }

    #[test]
    fn system_names() {
        for s in [SystemKind::DtwBaseline, SystemKind::DtwAdapted, SystemKind::Blstm] {
            assert_eq!(s.to_string().parse::<SystemKind>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.to_string());
        }
    }
}
