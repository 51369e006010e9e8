//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use biotouch::capture::{DigitSample, SampleKey, TouchPoint};
use biotouch::eval::ScoreSet;
use biotouch::features::{FunctionMatrix, NUM_FUNCTIONS};

/// Minimal accumulated cost over every monotone path from (0,0) to
/// (n_a-1, n_b-1), found by explicit enumeration, together with the lengths
/// of all paths attaining it. Costs are accumulated from the start so the
/// sums match a forward dynamic program bit for bit.
pub fn exhaustive_dtw(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn walk(cost: &[Vec<f64>], i: usize, j: usize, acc: f64, len: usize, best: &mut (f64, Vec<usize>)) {
        let acc = acc + cost[i][j];
        let len = len + 1;
        let (n_a, n_b) = (cost.len(), cost[0].len());
        if i == n_a - 1 && j == n_b - 1 {
            if acc < best.0 {
                *best = (acc, vec![len]);
            } else if acc == best.0 && !best.1.contains(&len) {
                best.1.push(len);
            }
            return;
        }
        if i + 1 < n_a && j + 1 < n_b {
            walk(cost, i + 1, j + 1, acc, len, best);
        }
        if i + 1 < n_a {
            walk(cost, i + 1, j, acc, len, best);
        }
        if j + 1 < n_b {
            walk(cost, i, j + 1, acc, len, best);
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    // The first cell is added to 0.0, matching the program's first step.
    walk(cost, 0, 0, 0.0, 0, &mut best);
    best
}

/// EER by scanning every candidate threshold and counting directly.
pub fn brute_force_eer(s: &ScoreSet) -> (f64, f64) {
    let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        let far = s.impostor.iter().filter(|&&x| x >= t).count() as f64 / s.impostor.len() as f64;
        let frr = s.genuine.iter().filter(|&&x| x < t).count() as f64 / s.genuine.len() as f64;
        let gap = (far - frr).abs();
        match best {
            Some((g, _, _)) if gap >= g => {}
            _ => best = Some((gap, t, 100.0 * (far + frr) / 2.0)),
        }
    }
    let (_, t, e) = best.expect("non-empty pools");
    (e, t)
}

/// Normalized single-channel matrix with the value in function `f`.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> FunctionMatrix {
    FunctionMatrix::from_frames(
        rows.iter()
            .map(|r| {
                let mut f = [0.0; NUM_FUNCTIONS];
                f[..r.len()].copy_from_slice(r);
                f
            })
            .collect(),
        true,
    )
}

pub fn sample(user: &str, digit: u8, points: &[(f64, f64)]) -> DigitSample {
    DigitSample::new(
        SampleKey::new(user, digit, 1, 1),
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| TouchPoint::new(x, y, 12.0 * i as f64))
            .collect(),
    )
    .expect("valid sample")
}
