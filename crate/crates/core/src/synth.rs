//! Synthetic writers for tests and demos.
//!
//! Every digit has a canonical polyline. A writer distorts it with an affine
//! map (size, aspect, slant, rotation), a smooth low-order Fourier offset
//! along the stroke and a personal speed profile that decides where points
//! fall on the path. Samples add a small perturbation of the writer's
//! parameters, point jitter and a session-level drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capture::{Dataset, DigitSample, SampleKey, TouchPoint};

/// Canonical strokes in a unit-wide, 1.5-tall box with y pointing up.
const SKELETONS: [&[(f64, f64)]; 10] = [
    &[
        (0.5, 1.5), (0.25, 1.4), (0.1, 1.1), (0.05, 0.75), (0.1, 0.4), (0.25, 0.1), (0.5, 0.0),
        (0.75, 0.1), (0.9, 0.4), (0.95, 0.75), (0.9, 1.1), (0.75, 1.4), (0.52, 1.5),
    ],
    &[(0.3, 1.2), (0.55, 1.5), (0.55, 0.0)],
    &[(0.1, 1.2), (0.3, 1.45), (0.7, 1.45), (0.85, 1.1), (0.1, 0.0), (0.9, 0.0)],
    &[(0.1, 1.4), (0.8, 1.4), (0.4, 0.8), (0.85, 0.5), (0.6, 0.05), (0.1, 0.15)],
    &[(0.7, 0.0), (0.7, 1.5), (0.05, 0.5), (0.95, 0.5)],
    &[(0.85, 1.5), (0.2, 1.5), (0.15, 0.85), (0.7, 0.9), (0.85, 0.4), (0.5, 0.0), (0.1, 0.15)],
    &[(0.8, 1.45), (0.3, 1.0), (0.15, 0.4), (0.45, 0.0), (0.8, 0.3), (0.6, 0.7), (0.2, 0.5)],
    &[(0.1, 1.5), (0.9, 1.5), (0.35, 0.0)],
    &[
        (0.5, 0.8), (0.15, 1.15), (0.5, 1.5), (0.85, 1.15), (0.5, 0.8), (0.1, 0.35), (0.5, 0.0),
        (0.9, 0.35), (0.5, 0.8),
    ],
    &[(0.8, 1.2), (0.5, 1.5), (0.2, 1.2), (0.5, 0.9), (0.8, 1.2), (0.75, 0.0)],
];

const HARMONICS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub seed: u64,
    /// Pixels per skeleton unit.
    pub size: f64,
    /// Scale of per-sample parameter perturbation relative to the spread
    /// between writers.
    pub sample_noise: f64,
    /// Same for the shift applied to every session-2 sample.
    pub session_drift: f64,
    /// Standard deviation of independent point jitter, pixels.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn new(users: usize, seed: u64) -> Self {
        Self {
            users,
            seed,
            size: 100.0,
            sample_noise: 0.3,
            session_drift: 0.2,
            jitter: 0.4,
        }
    }
}

/// Parameters of one writer for one digit.
#[derive(Debug, Clone, PartialEq)]
struct Style {
    scale: f64,
    aspect: f64,
    slant: f64,
    rotation: f64,
    offset_x: [(f64, f64); HARMONICS],
    offset_y: [(f64, f64); HARMONICS],
    speed: [f64; 2],
    points: f64,
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Style {
    fn random(rng: &mut impl Rng) -> Self {
        let mut harm = || {
            std::array::from_fn(|k| {
                let amp = 0.09 / (k + 1) as f64;
                (rng.gen_range(-amp..amp), rng.gen_range(0.0..std::f64::consts::TAU))
            })
        };
        let offset_x = harm();
        let offset_y = harm();
        Self {
            scale: rng.gen_range(0.8..1.2),
            aspect: rng.gen_range(0.8..1.2),
            slant: rng.gen_range(-0.35..0.35),
            rotation: rng.gen_range(-0.12..0.12),
            offset_x,
            offset_y,
            speed: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.3..0.3)],
            points: rng.gen_range(35.0..70.0),
        }
    }

    /// Moves every parameter by `amount` times a normal draw scaled to the
    /// spread of that parameter across writers.
    fn perturbed(&self, rng: &mut impl Rng, amount: f64) -> Self {
        let mut s = self.clone();
        let mut jiggle = |v: &mut f64, spread: f64| *v += amount * spread * normal(rng);
        jiggle(&mut s.scale, 0.12);
        jiggle(&mut s.aspect, 0.12);
        jiggle(&mut s.slant, 0.2);
        jiggle(&mut s.rotation, 0.07);
        for k in 0..HARMONICS {
            let spread = 0.05 / (k + 1) as f64;
            jiggle(&mut s.offset_x[k].0, spread);
            jiggle(&mut s.offset_y[k].0, spread);
        }
        jiggle(&mut s.speed[0], 0.35);
        jiggle(&mut s.speed[1], 0.17);
        jiggle(&mut s.points, 10.0);
        // Keep the time warp monotone.
        s.speed[0] = s.speed[0].clamp(-0.7, 0.7);
        s.speed[1] = s.speed[1].clamp(-0.25, 0.25);
        s
    }
}

/// Point at arc-length fraction `s` of a polyline.
fn along(poly: &[(f64, f64)], s: f64) -> (f64, f64) {
    let lens: Vec<f64> = poly
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .collect();
    let total: f64 = lens.iter().sum();
    let mut target = s.clamp(0.0, 1.0) * total;
    for (i, &l) in lens.iter().enumerate() {
        if target <= l || i == lens.len() - 1 {
            let f = if l > 0.0 { (target / l).min(1.0) } else { 0.0 };
            let (a, b) = (poly[i], poly[i + 1]);
            return (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        }
        target -= l;
    }
    *poly.last().expect("non-empty")
}

fn render(digit: u8, style: &Style, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<TouchPoint> {
    let poly = SKELETONS[digit as usize];
    let n = style.points.round().max(12.0) as usize;
    let (sin_r, cos_r) = style.rotation.sin_cos();
    let mut t = 0.0;
    (0..n)
        .map(|i| {
            let tau = i as f64 / (n - 1) as f64;
            // Monotone warp: derivative 1 + a cos(2πτ) + b cos(4πτ) stays positive.
            let s = tau
                + style.speed[0] * (std::f64::consts::TAU * tau).sin() / std::f64::consts::TAU
                + style.speed[1] * (2.0 * std::f64::consts::TAU * tau).sin()
                    / (2.0 * std::f64::consts::TAU);
            let (mut x, mut y) = along(poly, s);
            for k in 0..HARMONICS {
                let w = std::f64::consts::PI * (k + 1) as f64 * s;
                x += style.offset_x[k].0 * (w + style.offset_x[k].1).sin();
                y += style.offset_y[k].0 * (w + style.offset_y[k].1).sin();
            }
            x = (x + style.slant * y) * style.aspect;
            let (rx, ry) = (x * cos_r - y * sin_r, x * sin_r + y * cos_r);
            let px = rx * style.scale * cfg.size + cfg.jitter * normal(rng);
            // Screen coordinates grow downwards.
            let py = -ry * style.scale * cfg.size + cfg.jitter * normal(rng);
            let point = TouchPoint::new(px, py, t);
            t += rng.gen_range(14.0..18.0);
            point
        })
        .collect()
}

/// Writer ids sort in creation order.
pub fn writer_id(index: usize) -> String {
    format!("w{index:03}")
}

/// Two sessions of four repetitions of every digit for `cfg.users` writers.
pub fn generate(cfg: &SynthConfig) -> Dataset {
    let mut samples = Vec::new();
    for w in 0..cfg.users {
        for digit in 0..10u8 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((w as u64) << 8 | digit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let style = Style::random(&mut rng);
            for session in 1..=2u8 {
                let base = if session == 1 {
                    style.clone()
                } else {
                    style.perturbed(&mut rng, cfg.session_drift)
                };
                for rep in 1..=4u8 {
                    let s = base.perturbed(&mut rng, cfg.sample_noise);
                    let points = render(digit, &s, cfg, &mut rng);
                    let key = SampleKey::new(writer_id(w), digit, session, rep);
                    samples.push(DigitSample::new(key, points).expect("synthetic samples are valid"));
                }
            }
        }
    }
    Dataset::from_samples(samples).expect("unique keys")
}

/// One fresh drawing of `digit` by writer `w`, independent of the samples in
/// [`generate`] but from the same style.
pub fn draw(cfg: &SynthConfig, w: usize, digit: u8, nonce: u64) -> DigitSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((w as u64) << 8 | digit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let style = Style::random(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(nonce.wrapping_add(0xA5A5) ^ rng.gen::<u64>());
    let s = style.perturbed(&mut rng, cfg.sample_noise);
    let points = render(digit, &s, cfg, &mut rng);
    DigitSample::new(SampleKey::new(writer_id(w), digit, 1, 1), points).expect("synthetic samples are valid")
}
