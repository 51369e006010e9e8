//! Elastic matching of function matrices and template scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FunctionMatrix, FunctionSubset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtwError {
    #[error("function subset is empty")]
    SubsetEmpty,
    #[error("function matrix is not normalized")]
    NotNormalized,
    #[error("template has no enrolment samples")]
    EmptyTemplate,
    #[error("template holds {0} samples, allowed 1..=4")]
    TemplateSize(usize),
    #[error("cannot match an empty sequence")]
    EmptySequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    /// Minimal accumulated distance.
    pub distance: f64,
    /// Number of cells on the optimal warping path.
    pub path_len: usize,
    /// `exp(-distance / path_len)`.
    pub score: f64,
}

/// Dynamic program over an `n_a × n_b` grid with steps (1,0), (0,1), (1,1),
/// unit weights and anchored endpoints. Ties between predecessors prefer the
/// diagonal, then the step that advances `a`.
pub fn elastic_match<F>(n_a: usize, n_b: usize, local_cost: F) -> Result<DtwResult, DtwError>
where
    F: Fn(usize, usize) -> f64,
{
    if n_a == 0 || n_b == 0 {
        return Err(DtwError::EmptySequence);
    }
    // Two rolling rows of (accumulated cost, path length).
    let mut prev = vec![(f64::INFINITY, 0usize); n_b];
    let mut cur = vec![(f64::INFINITY, 0usize); n_b];
    for i in 0..n_a {
        for j in 0..n_b {
            let c = local_cost(i, j);
            cur[j] = if i == 0 && j == 0 {
                (c, 1)
            } else {
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { (f64::INFINITY, 0) };
                let up = if i > 0 { prev[j] } else { (f64::INFINITY, 0) };
                let left = if j > 0 { cur[j - 1] } else { (f64::INFINITY, 0) };
                let mut best = diag;
                if up.0 < best.0 {
                    best = up;
                }
                if left.0 < best.0 {
                    best = left;
                }
                (best.0 + c, best.1 + 1)
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (distance, path_len) = prev[n_b - 1];
    Ok(DtwResult {
        distance,
        path_len,
        score: (-distance / path_len as f64).exp(),
    })
}

/// Matches two normalized matrices using Euclidean local distance over the
/// selected functions.
pub fn dtw_match(
    a: &FunctionMatrix,
    b: &FunctionMatrix,
    subset: &FunctionSubset,
) -> Result<DtwResult, DtwError> {
    if !a.is_normalized() || !b.is_normalized() {
        return Err(DtwError::NotNormalized);
    }
    let offsets = subset.offsets();
    if offsets.is_empty() {
        return Err(DtwError::SubsetEmpty);
    }
    let fa = a.frames();
    let fb = b.frames();
    elastic_match(fa.len(), fb.len(), |i, j| {
        offsets
            .iter()
            .map(|&k| {
                let d = fa[i][k] - fb[j][k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    })
}

/// Enrolment samples of one user for one digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub user_id: String,
    pub digit: u8,
    enrolment: Vec<FunctionMatrix>,
}

impl Template {
    pub const MAX_SAMPLES: usize = 4;

    pub fn new(
        user_id: impl Into<String>,
        digit: u8,
        enrolment: Vec<FunctionMatrix>,
    ) -> Result<Self, DtwError> {
        if enrolment.is_empty() {
            return Err(DtwError::EmptyTemplate);
        }
        if enrolment.len() > Self::MAX_SAMPLES {
            return Err(DtwError::TemplateSize(enrolment.len()));
        }
        if enrolment.iter().any(|m| !m.is_normalized()) {
            return Err(DtwError::NotNormalized);
        }
        Ok(Self {
            user_id: user_id.into(),
            digit,
            enrolment,
        })
    }

    pub fn enrolment(&self) -> &[FunctionMatrix] {
        &self.enrolment
    }

    pub fn len(&self) -> usize {
        self.enrolment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enrolment.is_empty()
    }
}

/// Mean pair score between each enrolment sample and the probe.
pub fn score_against_template(
    template: &Template,
    probe: &FunctionMatrix,
    subset: &FunctionSubset,
) -> Result<f64, DtwError> {
    score_against_refs(template.enrolment.iter(), probe, subset)
}

/// Same as [`score_against_template`] for borrowed enrolment samples.
pub fn score_against_refs<'a>(
    enrolment: impl IntoIterator<Item = &'a FunctionMatrix>,
    probe: &FunctionMatrix,
    subset: &FunctionSubset,
) -> Result<f64, DtwError> {
    let mut scores = enrolment
        .into_iter()
        .map(|e| dtw_match(e, probe, subset).map(|r| r.score))
        .collect::<Result<Vec<f64>, _>>()?;
    if scores.is_empty() {
        return Err(DtwError::EmptyTemplate);
    }
    // Summing in sorted order makes the mean independent of enrolment order.
    scores.sort_by(f64::total_cmp);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NUM_FUNCTIONS;

    fn single(values: &[f64]) -> FunctionMatrix {
        FunctionMatrix::from_frames(
            values
                .iter()
                .map(|&v| {
                    let mut f = [0.0; NUM_FUNCTIONS];
                    f[0] = v;
                    f
                })
                .collect(),
            true,
        )
    }

    fn x_only() -> FunctionSubset {
        FunctionSubset::new(&[1]).unwrap()
    }

    #[test]
    fn one_by_one_grid() {
        let r = dtw_match(&single(&[0.0]), &single(&[1.0]), &x_only()).unwrap();
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.path_len, 1);
        assert!((r.score - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn elastic_repeat_costs_nothing() {
        // Brute-force enumeration of the 3x4 grid paths gives D = 0 via
        // (0,0),(1,1),(1,2),(2,3).
        let r = dtw_match(&single(&[0.0, 1.0, 2.0]), &single(&[0.0, 1.0, 1.0, 2.0]), &x_only())
            .unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path_len, 4);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn self_match_scores_one() {
        let a = single(&[0.3, -1.0, 2.0, 0.5]);
        let r = dtw_match(&a, &a, &x_only()).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path_len, 4);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn rejects_unnormalized() {
        let raw = FunctionMatrix::from_frames(vec![[0.0; NUM_FUNCTIONS]], false);
        assert_eq!(
            dtw_match(&raw, &single(&[0.0]), &x_only()),
            Err(DtwError::NotNormalized)
        );
    }

    #[test]
    fn template_mean_and_errors() {
        let probe = single(&[0.0]);
        // Scores exp(-d) for d chosen so the pair scores are 0.2, 0.4, 0.6.
        let enrol: Vec<FunctionMatrix> = [0.2f64, 0.4, 0.6]
            .iter()
            .map(|s| single(&[-s.ln()]))
            .collect();
        let t = Template::new("u", 0, enrol.clone()).unwrap();
        let s = score_against_template(&t, &probe, &x_only()).unwrap();
        assert!((s - 0.4).abs() < 1e-12);

        let mut rev = enrol.clone();
        rev.reverse();
        let t2 = Template::new("u", 0, rev).unwrap();
        let s2 = score_against_template(&t2, &probe, &x_only()).unwrap();
        assert_eq!(s, s2);

        let one = Template::new("u", 0, enrol[..1].to_vec()).unwrap();
        let pair = dtw_match(&enrol[0], &probe, &x_only()).unwrap().score;
        assert_eq!(score_against_template(&one, &probe, &x_only()).unwrap(), pair);

        assert_eq!(Template::new("u", 0, vec![]), Err(DtwError::EmptyTemplate));
        assert_eq!(
            Template::new("u", 0, vec![probe.clone(); 5]),
            Err(DtwError::TemplateSize(5))
        );
        assert_eq!(
            score_against_refs(std::iter::empty(), &probe, &x_only()),
            Err(DtwError::EmptyTemplate)
        );
    }
}
