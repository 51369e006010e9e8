mod common;

use std::collections::HashMap;
use std::sync::Mutex;

use biotouch::capture::{preprocess, DigitSample, SampleKey, TouchPoint};
use biotouch::dtw::{dtw_match, elastic_match, score_against_template, Template};
use biotouch::eval::{compute_eer, det_curve, fuse, PasswordPools, ScoreCube, ScoreSet};
use biotouch::features::{extract, znorm, FunctionSubset, NUM_FUNCTIONS};
use biotouch::sffs::{sffs_select, SffsConfig};
use common::{brute_force_eer, exhaustive_dtw, matrix_from_rows};
use proptest::prelude::*;

fn rows(max_len: usize, width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, width), 1..=max_len)
}

fn stroke() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-400.0..400.0f64, -400.0..400.0f64), 5..40)
}

fn to_sample(points: &[(f64, f64)]) -> DigitSample {
    common::sample("p", 3, points)
}

fn pool() -> impl Strategy<Value = Vec<f64>> {
    // A coarse grid makes ties between and within pools common.
    prop::collection::vec((0u32..20).prop_map(|k| k as f64 / 20.0), 1..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dtw_matches_exhaustive_paths(a in rows(6, 3), b in rows(6, 3)) {
        let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        }).collect()).collect();
        let (d, lens) = exhaustive_dtw(&cost);
        let r = dtw_match(&matrix_from_rows(&a), &matrix_from_rows(&b), &FunctionSubset::new(&[1, 2, 3]).unwrap()).unwrap();
        prop_assert_eq!(r.distance, d);
        prop_assert!(lens.contains(&r.path_len), "K = {} not among optimal lengths {:?}", r.path_len, lens);
        prop_assert_eq!(r.score, (-d / r.path_len as f64).exp());
    }

    #[test]
    fn dtw_distance_is_symmetric(a in rows(12, 4), b in rows(12, 4)) {
        let s = FunctionSubset::new(&[1, 2, 3, 4]).unwrap();
        let ab = dtw_match(&matrix_from_rows(&a), &matrix_from_rows(&b), &s).unwrap();
        let ba = dtw_match(&matrix_from_rows(&b), &matrix_from_rows(&a), &s).unwrap();
        prop_assert_eq!(ab.distance, ba.distance);
    }

    #[test]
    fn dtw_self_match_is_perfect(a in rows(15, 5)) {
        let m = matrix_from_rows(&a);
        let r = dtw_match(&m, &m, &FunctionSubset::new(&[1, 2, 3, 4, 5]).unwrap()).unwrap();
        prop_assert_eq!(r.distance, 0.0);
        prop_assert_eq!(r.path_len, a.len());
        prop_assert_eq!(r.score, 1.0);
    }

    #[test]
    fn dtw_monotone_in_subset(a in rows(10, 6), b in rows(10, 6), small in prop::collection::btree_set(1usize..=6, 1..=3), extra in prop::collection::btree_set(1usize..=6, 0..=3)) {
        let s1: Vec<usize> = small.iter().copied().collect();
        let s2: Vec<usize> = small.union(&extra).copied().collect();
        let (ma, mb) = (matrix_from_rows(&a), matrix_from_rows(&b));
        let d1 = dtw_match(&ma, &mb, &FunctionSubset::new(&s1).unwrap()).unwrap().distance;
        let d2 = dtw_match(&ma, &mb, &FunctionSubset::new(&s2).unwrap()).unwrap().distance;
        prop_assert!(d1 <= d2);
    }

    #[test]
    fn elastic_match_scores_in_unit_interval(n_a in 1usize..20, n_b in 1usize..20, seed in any::<u64>()) {
        let r = elastic_match(n_a, n_b, |i, j| ((i as u64 * 31 + j as u64 * 17) ^ seed) as f64 % 5.0).unwrap();
        prop_assert!(r.score > 0.0 && r.score <= 1.0);
        prop_assert!(r.path_len >= n_a.max(n_b) && r.path_len < n_a + n_b);
    }

    #[test]
    fn template_score_ignores_enrolment_order(refs in prop::collection::vec(rows(6, 2), 1..=4), probe in rows(6, 2), rot in 0usize..4) {
        let mats: Vec<_> = refs.iter().map(|r| matrix_from_rows(r)).collect();
        let mut rotated = mats.clone();
        rotated.rotate_left(rot % mats.len());
        let s = FunctionSubset::new(&[1, 2]).unwrap();
        let p = matrix_from_rows(&probe);
        let a = score_against_template(&Template::new("u", 0, mats).unwrap(), &p, &s).unwrap();
        let b = score_against_template(&Template::new("u", 0, rotated).unwrap(), &p, &s).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn eer_matches_threshold_sweep(genuine in pool(), impostor in pool()) {
        let set = ScoreSet::new(genuine, impostor);
        let e = compute_eer(&set).unwrap();
        let (oe, ot) = brute_force_eer(&set);
        prop_assert_eq!(e.eer, oe);
        prop_assert_eq!(e.threshold, ot);
    }

    #[test]
    fn eer_invariant_under_increasing_map(genuine in pool(), impostor in pool()) {
        let set = ScoreSet::new(genuine, impostor);
        let f = |x: f64| (3.0 * x).exp() + x;
        let mapped = ScoreSet::new(set.genuine.iter().map(|&x| f(x)).collect(), set.impostor.iter().map(|&x| f(x)).collect());
        prop_assert_eq!(compute_eer(&set).unwrap().eer, compute_eer(&mapped).unwrap().eer);
    }

    #[test]
    fn det_rates_are_monotone(genuine in pool(), impostor in pool()) {
        let det = det_curve(&ScoreSet::new(genuine, impostor)).unwrap();
        for w in det.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].far <= w[0].far);
            prop_assert!(w[1].frr >= w[0].frr);
        }
    }

    #[test]
    fn genuine_copy_of_impostor_never_lowers_frr(genuine in pool(), impostor in pool(), pick in any::<prop::sample::Index>(), t in 0.0..1.2f64) {
        let set = ScoreSet::new(genuine, impostor);
        let mut more = set.clone();
        more.genuine.push(set.impostor[pick.index(set.impostor.len())]);
        let frr_count = |s: &ScoreSet| s.genuine.iter().filter(|&&g| g < t).count();
        prop_assert!(frr_count(&more) >= frr_count(&set));
    }

    #[test]
    fn fuse_is_permutation_invariant(mut v in prop::collection::vec(0.0..1.0f64, 1..10), seed in any::<u64>()) {
        let a = fuse(&v).unwrap();
        let n = v.len();
        v.rotate_left(seed as usize % n);
        v.swap(0, (seed as usize / 7) % n);
        prop_assert_eq!(a, fuse(&v).unwrap());
    }

    #[test]
    fn password_eer_ignores_digit_order(mut digits in prop::collection::vec(0u8..3, 1..5), seed in any::<u64>()) {
        let users: Vec<String> = (0..4).map(|u| format!("u{u}")).collect();
        let pools = PasswordPools {
            n_enrol: 1,
            cubes: (0..10u8).map(|d| ScoreCube::from_fn(d, 1, users.clone(), |u, v, r| {
                ((u * 13 + v * 7 + r * 3 + d as usize * 5) % 11) as f64 / 11.0
            })).collect(),
        };
        let a = pools.fused(&digits).unwrap();
        let n = digits.len();
        digits.rotate_left(seed as usize % n);
        let b = pools.fused(&digits).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn preprocess_centers_and_rebases(points in stroke(), t0 in 0.0..1e4f64) {
        let s = DigitSample::new(SampleKey::new("p", 1, 1, 1), points.iter().enumerate().map(|(i, &(x, y))| TouchPoint::new(x, y, t0 + 10.0 * i as f64)).collect()).unwrap();
        let p = preprocess(&s);
        let (cx, cy) = p.centroid();
        prop_assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
        prop_assert_eq!(p.points()[0].t, 0.0);
        prop_assert_eq!(p.len(), s.len());
        prop_assert_eq!(preprocess(&p), p.clone());
    }

    #[test]
    fn preprocess_ignores_translation(points in stroke(), dx in -1e3..1e3f64, dy in -1e3..1e3f64) {
        let s = to_sample(&points);
        let a = preprocess(&s);
        let b = preprocess(&s.translated(dx, dy));
        for (p, q) in a.points().iter().zip(b.points()) {
            prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            prop_assert_eq!(p.t, q.t);
        }
    }

    #[test]
    fn extract_is_well_formed(points in stroke()) {
        let m = extract(&preprocess(&to_sample(&points))).unwrap();
        prop_assert_eq!(m.len(), points.len());
        prop_assert!(!m.is_normalized());
        for f in m.frames() {
            prop_assert!(f.iter().all(|v| v.is_finite()));
            prop_assert!((f[17] * f[17] + f[18] * f[18] - 1.0).abs() < 1e-12);
            prop_assert!(f[14] >= 0.0 && f[14] <= 1.0 + 1e-12);
        }
        let z = znorm(&m).unwrap();
        for k in 0..NUM_FUNCTIONS {
            let c = z.channel(k + 1);
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9, "channel {} mean {}", k + 1, mean);
            prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-9, "channel {} var {}", k + 1, var);
        }
    }

    #[test]
    fn rotation_keeps_speed_and_shifts_angle(points in stroke(), angle in -3.0..3.0f64) {
        let s = to_sample(&points);
        let (sin, cos) = angle.sin_cos();
        let rotated = common::sample("p", 3, &points.iter().map(|&(x, y)| (x * cos - y * sin, x * sin + y * cos)).collect::<Vec<_>>());
        let a = extract(&preprocess(&s)).unwrap();
        let b = extract(&preprocess(&rotated)).unwrap();
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            let scale = fa[3].abs().max(1.0);
            prop_assert!((fa[3] - fb[3]).abs() < 1e-9 * scale, "speed {} vs {}", fa[3], fb[3]);
            if fa[3] > 1e-6 {
                let d = (fb[2] - fa[2] - angle).rem_euclid(std::f64::consts::TAU);
                prop_assert!(d < 1e-6 || d > std::f64::consts::TAU - 1e-6, "theta shift {}", d);
            }
        }
    }

    #[test]
    fn sffs_exhaustive_for_three_candidates(table in prop::collection::vec(0u32..50, 8)) {
        // Objective over subsets of {0,1,2}, indexed by bitmask.
        let objective = |s: &[usize]| table[s.iter().map(|&c| 1usize << c).sum::<usize>()] as f64;
        let t = sffs_select(&[0, 1, 2], objective, &SffsConfig::new(3)).unwrap();
        let exhaustive = (1..8usize).map(|m| table[m]).min().unwrap() as f64;
        prop_assert_eq!(t.best_objective, exhaustive);
        prop_assert_eq!(objective(&t.best_subset), t.best_objective);
    }

    #[test]
    fn sffs_memo_changes_nothing_and_evaluates_once(weights in prop::collection::vec(-5i32..5, 8), target in 0usize..8) {
        let objective = |s: &[usize]| {
            let w: i32 = s.iter().map(|&c| weights[c]).sum();
            (w - target as i32).abs() as f64 + 0.01 * s.len() as f64
        };
        let cands: Vec<usize> = (0..8).collect();
        let calls = Mutex::new(HashMap::<Vec<usize>, usize>::new());
        let counted = |s: &[usize]| {
            *calls.lock().unwrap().entry(s.to_vec()).or_default() += 1;
            objective(s)
        };
        let memo = sffs_select(&cands, counted, &SffsConfig::new(6)).unwrap();
        let mut cfg = SffsConfig::new(6);
        cfg.memoize = false;
        let plain = sffs_select(&cands, objective, &cfg).unwrap();
        prop_assert_eq!(&memo.history, &plain.history);
        prop_assert_eq!(&memo.best_subset, &plain.best_subset);
        prop_assert!(calls.lock().unwrap().values().all(|&n| n == 1));
        prop_assert_eq!(memo.evaluations, calls.lock().unwrap().len());
        let mut par = SffsConfig::new(6);
        par.parallel = true;
        prop_assert_eq!(sffs_select(&cands, objective, &par).unwrap(), memo);
    }
}

#[test]
fn sffs_can_miss_optimum_with_four_candidates() {
    // The pair {2,3} is best overall but the search never reaches it: it
    // starts from 0, the cheapest single, and {0,x} never beats {0,1}, so no
    // exclusion is ever taken.
    let objective = |s: &[usize]| match s {
        [0] => 1.0,
        [1] | [2] | [3] => 2.0,
        [0, 1] => 1.5,
        [0, _] => 1.8,
        [2, 3] => 0.1,
        [_, _] => 3.0,
        [0, 1, _] => 1.2,
        [_, _, _] => 5.0,
        _ => 4.0,
    };
    let t = sffs_select(&[0, 1, 2, 3], objective, &SffsConfig::new(4)).unwrap();
    assert_eq!(t.best_subset, vec![0]);
    assert!(t.best_objective > 0.1);
}
