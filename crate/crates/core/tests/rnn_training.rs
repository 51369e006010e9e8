use biotouch::rnn::{
    pair_loss_and_gradient, score_sequences, train, NetworkParams, NetworkShape, PairSet, Sequence, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MICRO: NetworkShape = NetworkShape {
    input: 2,
    hidden1: 3,
    hidden2: 4,
};

fn random_sequence(rng: &mut impl Rng, len: usize, width: usize) -> Sequence {
    (0..len)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect()
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Largest per-parameter relative error between the analytic gradient and
/// central differences, with relative error measured against
/// max(|analytic|, |numeric|, floor).
fn worst_relative_error(params: &NetworkParams, a: &Sequence, b: &Sequence, y: f64, step: f64, floor: f64) -> f64 {
    let (_, analytic) = pair_loss_and_gradient(params, a, b, y);
    let mut worst: f64 = 0.0;
    for i in 0..params.num_params() {
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += step;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= step;
        let lp = bce(score_sequences(&plus, a, b).unwrap(), y);
        let lm = bce(score_sequences(&minus, a, b).unwrap(), y);
        let numeric = (lp - lm) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_central_differences_on_micro_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (trial, (la, lb)) in [(3, 3), (3, 5), (6, 4)].into_iter().enumerate() {
        let params = NetworkParams::init_with_shape(MICRO, 100 + trial as u64);
        let a = random_sequence(&mut rng, la, MICRO.input);
        let b = random_sequence(&mut rng, lb, MICRO.input);
        for y in [0.0, 1.0] {
            let err = worst_relative_error(&params, &a, &b, y, 1e-4, 1e-7);
            assert!(err < 1e-3, "lengths {la}x{lb}, label {y}: relative error {err}");
        }
    }
}

#[test]
fn loss_matches_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = NetworkParams::init_with_shape(MICRO, 1);
    let a = random_sequence(&mut rng, 4, 2);
    let b = random_sequence(&mut rng, 5, 2);
    let (loss, _) = pair_loss_and_gradient(&params, &a, &b, 1.0);
    let p = score_sequences(&params, &a, &b).unwrap();
    assert!((loss - bce(p, 1.0)).abs() < 1e-12);
}

#[test]
fn full_size_gradient_spot_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = NetworkParams::init(9);
    let a = random_sequence(&mut rng, 6, 21);
    let b = random_sequence(&mut rng, 7, 21);
    let (_, analytic) = pair_loss_and_gradient(&params, &a, &b, 1.0);
    let step = 1e-5;
    let n = params.num_params();
    for k in 0..40 {
        let i = (k * 7919) % n;
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += step;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= step;
        let numeric = (bce(score_sequences(&plus, &a, &b).unwrap(), 1.0)
            - bce(score_sequences(&minus, &a, &b).unwrap(), 1.0))
            / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-7);
        assert!(
            (analytic[i] - numeric).abs() / scale < 1e-3,
            "param {i}: analytic {} numeric {numeric}",
            analytic[i]
        );
    }
}

/// Constant sequences at level 0 or 1; pairs at the same level are genuine.
fn separable_pairs() -> PairSet {
    let mut set = PairSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ids = Vec::new();
    for level in [0.0, 1.0] {
        for _ in 0..4 {
            let len = rng.gen_range(3..6);
            let seq: Sequence = (0..len)
                .map(|_| vec![level + rng.gen_range(-0.05..0.05), level + rng.gen_range(-0.05..0.05)])
                .collect();
            ids.push((set.push_sequence(seq), level));
        }
    }
    for (i, &(a, la)) in ids.iter().enumerate() {
        for &(b, lb) in &ids[i + 1..] {
            set.pairs.push((a, b, la == lb));
        }
    }
    set
}

#[test]
fn toy_training_reduces_loss_by_ninety_percent() {
    let data = separable_pairs();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 200,
        batch_size: data.len(),
        holdout_fraction: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let init = NetworkParams::init_with_shape(MICRO, 2);
    let (trained, report) = train(&init, &data, &cfg).unwrap();
    let first = report.loss_curve[0];
    let last = *report.loss_curve.last().unwrap();
    assert!(last <= 0.1 * first, "loss went from {first} to {last}");
    for w in report.loss_curve[..10].windows(2) {
        assert!(w[1] <= w[0], "early epochs should descend: {:?}", &report.loss_curve[..10]);
    }
    // Every pair ends on the right side of one half.
    for &(a, b, genuine) in &data.pairs {
        let s = score_sequences(&trained, &data.sequences[a], &data.sequences[b]).unwrap();
        assert_eq!(s > 0.5, genuine, "pair ({a},{b}) scored {s}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = separable_pairs();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 7,
        seed: 9,
        holdout_fraction: 0.2,
        ..TrainConfig::default()
    };
    let init = NetworkParams::init_with_shape(MICRO, 2);
    let a = train(&init, &data, &cfg).unwrap();
    let b = train(&init, &data, &cfg).unwrap();
    assert_eq!(a.0.as_slice(), b.0.as_slice());
    assert_eq!(a.1, b.1);
}
