//! Sequential forward floating search over a finite candidate set.
//!
//! The objective is minimized. After every inclusion step the search tries
//! conditional exclusions, taking one only when it strictly beats the best
//! objective recorded so far for the smaller size. Ties between candidates
//! go to the lowest candidate id.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SffsError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("objective returned a non-finite value for {0:?}")]
    NonFiniteObjective(Vec<usize>),
    #[error("invalid size bounds: min {min}, max {max}, candidates {candidates}")]
    BadBounds { min: usize, max: usize, candidates: usize },
    #[error("at most 64 candidates are supported, got {0}")]
    TooManyCandidates(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub kind: StepKind,
    pub candidate: usize,
    /// Objective of the subset after the step.
    pub objective: f64,
    pub subset: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBest {
    pub size: usize,
    pub subset: Vec<usize>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub best_subset: Vec<usize>,
    pub best_objective: f64,
    pub history: Vec<TraceStep>,
    /// Best subset reached at each size, smallest size first.
    pub best_by_size: Vec<SizeBest>,
    /// Number of objective calls actually made.
    pub evaluations: usize,
}

impl SelectionTrace {
    pub fn best_of_size(&self, size: usize) -> Option<&SizeBest> {
        self.best_by_size.iter().find(|b| b.size == size)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SffsConfig {
    pub max_size: usize,
    pub min_size: usize,
    pub memoize: bool,
    /// Evaluate the candidates of one sweep on the rayon pool.
    pub parallel: bool,
}

impl SffsConfig {
    pub fn new(max_size: usize) -> Self {
        Self {
            max_size,
            min_size: 1,
            memoize: true,
            parallel: false,
        }
    }
}

type Mask = u64;

struct Evaluator<'a, F> {
    candidates: &'a [usize],
    objective: F,
    memo: Option<Mutex<HashMap<Mask, f64>>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl<F> Evaluator<'_, F>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn ids(&self, mask: Mask) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| self.candidates[i])
            .collect()
    }

    fn eval(&self, mask: Mask) -> Result<f64, SffsError> {
        if let Some(memo) = &self.memo {
            if let Some(&v) = memo.lock().expect("memo lock").get(&mask) {
                return Ok(v);
            }
        }
        let ids = self.ids(mask);
        let v = (self.objective)(&ids);
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        if !v.is_finite() {
            return Err(SffsError::NonFiniteObjective(ids));
        }
        if let Some(memo) = &self.memo {
            memo.lock().expect("memo lock").insert(mask, v);
        }
        Ok(v)
    }

    /// Evaluates `base` toggled at each position in `positions`, returning the
    /// minimizing position (earliest wins ties).
    fn best_toggle(
        &self,
        base: Mask,
        positions: &[usize],
        parallel: bool,
    ) -> Result<Option<(usize, f64)>, SffsError> {
        let values: Vec<Result<f64, SffsError>> = if parallel {
            positions
                .par_iter()
                .map(|&p| self.eval(base ^ (1 << p)))
                .collect()
        } else {
            positions.iter().map(|&p| self.eval(base ^ (1 << p))).collect()
        };
        let mut best: Option<(usize, f64)> = None;
        for (&p, v) in positions.iter().zip(values) {
            let v = v?;
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((p, v));
            }
        }
        Ok(best)
    }
}

/// Runs the floating search. `candidates` may be given in any order; they
/// are sorted so ties resolve to the lowest id.
pub fn sffs_select<F>(
    candidates: &[usize],
    objective: F,
    config: &SffsConfig,
) -> Result<SelectionTrace, SffsError>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.is_empty() {
        return Err(SffsError::EmptyCandidates);
    }
    if cands.len() > 64 {
        return Err(SffsError::TooManyCandidates(cands.len()));
    }
    let max_size = config.max_size;
    let min_size = config.min_size.max(1);
    if max_size == 0 || max_size > cands.len() || min_size > max_size {
        return Err(SffsError::BadBounds {
            min: config.min_size,
            max: max_size,
            candidates: cands.len(),
        });
    }

    let ev = Evaluator {
        candidates: &cands,
        objective,
        memo: config.memoize.then(|| Mutex::new(HashMap::new())),
        calls: Default::default(),
    };

    // best[k] = (mask, objective) of the best subset of size k reached so far.
    let mut best: Vec<Option<(Mask, f64)>> = vec![None; max_size + 1];
    let mut history = Vec::new();
    let mut current: Mask = 0;
    let n = cands.len();

    while (current.count_ones() as usize) < max_size {
        let outside: Vec<usize> = (0..n).filter(|&p| current & (1 << p) == 0).collect();
        let Some((pos, value)) = ev.best_toggle(current, &outside, config.parallel)? else {
            break;
        };
        current |= 1 << pos;
        let size = current.count_ones() as usize;
        history.push(TraceStep {
            kind: StepKind::Add,
            candidate: cands[pos],
            objective: value,
            subset: ev.ids(current),
        });
        if best[size].is_none_or(|(_, b)| value < b) {
            best[size] = Some((current, value));
        }

        // Conditional exclusion.
        loop {
            let size = current.count_ones() as usize;
            if size <= min_size || size < 2 {
                break;
            }
            let inside: Vec<usize> = (0..n).filter(|&p| current & (1 << p) != 0).collect();
            let Some((pos, value)) = ev.best_toggle(current, &inside, config.parallel)? else {
                break;
            };
            let improves = best[size - 1].is_none_or(|(_, b)| value < b);
            if !improves {
                break;
            }
            current &= !(1 << pos);
            best[size - 1] = Some((current, value));
            history.push(TraceStep {
                kind: StepKind::Remove,
                candidate: cands[pos],
                objective: value,
                subset: ev.ids(current),
            });
        }
    }

    let best_by_size: Vec<SizeBest> = best
        .iter()
        .enumerate()
        .filter_map(|(size, b)| {
            b.map(|(mask, objective)| SizeBest {
                size,
                subset: ev.ids(mask),
                objective,
            })
        })
        .collect();
    // Lowest objective wins; ties go to the smaller subset.
    let overall = best_by_size
        .iter()
        .filter(|b| b.size >= min_size)
        .fold(None::<&SizeBest>, |acc, b| match acc {
            Some(a) if a.objective <= b.objective => Some(a),
            _ => Some(b),
        })
        .expect("at least one size reached");

    Ok(SelectionTrace {
        best_subset: overall.subset.clone(),
        best_objective: overall.objective,
        history,
        best_by_size: best_by_size.clone(),
        evaluations: ev.calls.load(std::sync::atomic::Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym_diff(target: &'static [usize]) -> impl Fn(&[usize]) -> f64 + Sync {
        move |s: &[usize]| {
            let a = s.iter().filter(|c| !target.contains(c)).count();
            let b = target.iter().filter(|c| !s.contains(c)).count();
            (a + b) as f64
        }
    }

    #[test]
    fn single_candidate() {
        let t = sffs_select(&[3], |_| 1.0, &SffsConfig::new(1)).unwrap();
        assert_eq!(t.best_subset, vec![3]);
        assert_eq!(t.history.len(), 1);
        assert_eq!(t.history[0].kind, StepKind::Add);
    }

    #[test]
    fn finds_constructed_minimum() {
        let t = sffs_select(&(0..8).collect::<Vec<_>>(), sym_diff(&[2, 5]), &SffsConfig::new(8))
            .unwrap();
        assert_eq!(t.best_subset, vec![2, 5]);
        assert_eq!(t.best_objective, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            sffs_select(&[], |_| 0.0, &SffsConfig::new(1)),
            Err(SffsError::EmptyCandidates)
        );
        assert_eq!(
            sffs_select(&[1, 2], |_| f64::NAN, &SffsConfig::new(2)),
            Err(SffsError::NonFiniteObjective(vec![1]))
        );
        assert!(matches!(
            sffs_select(&[1, 2], |_| 0.0, &SffsConfig::new(3)),
            Err(SffsError::BadBounds { .. })
        ));
    }

    #[test]
    fn steps_change_size_by_one() {
        let obj = |s: &[usize]| {
            let sum: usize = s.iter().map(|c| c * 7 % 11).sum();
            (sum as f64 - 12.0).abs() + 0.1 * s.len() as f64
        };
        let t = sffs_select(&(0..10).collect::<Vec<_>>(), obj, &SffsConfig::new(10)).unwrap();
        let mut prev = 0usize;
        for step in &t.history {
            let len = step.subset.len();
            match step.kind {
                StepKind::Add => assert_eq!(len, prev + 1),
                StepKind::Remove => assert_eq!(len + 1, prev),
            }
            assert_eq!(obj(&step.subset), step.objective);
            prev = len;
        }
        let size = t.best_subset.len();
        let min_at_size = t
            .history
            .iter()
            .filter(|s| s.subset.len() == size)
            .map(|s| s.objective)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(t.best_objective, min_at_size);
    }

    #[test]
    fn respects_min_size() {
        let mut cfg = SffsConfig::new(4);
        cfg.min_size = 3;
        let t = sffs_select(&[0, 1, 2, 3, 4], sym_diff(&[1]), &cfg).unwrap();
        assert_eq!(t.best_subset.len(), 3);
    }
}
