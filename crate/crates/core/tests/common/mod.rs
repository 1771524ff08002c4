//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use spatial_bench::probe::{
    cross_entropy, AbmilpParams, EfficientProbeParams, Head, LinearGapParams, Pooling, Tokens,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn vector(rng: &mut impl Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-scale..scale))
}

pub fn tokens(rng: &mut impl Rng, patches: usize, specials: usize, dim: usize) -> Tokens {
    Tokens::new(matrix(rng, patches, dim, 1.0), matrix(rng, specials, dim, 1.0))
}

pub fn linear(rng: &mut impl Rng, dim: usize) -> LinearGapParams {
    LinearGapParams::from_parts(matrix(rng, 4, dim, 0.5), vector(rng, 4, 0.5), Pooling::Gap).unwrap()
}

/// Every parameter group nonzero, so gradients reach all of them.
pub fn abmilp(rng: &mut impl Rng, dim: usize, hidden: usize) -> AbmilpParams {
    AbmilpParams::from_parts(
        matrix(rng, hidden, dim, 0.5),
        vector(rng, hidden, 0.8),
        matrix(rng, 4, dim, 0.5),
        vector(rng, 4, 0.5),
    )
    .unwrap()
}

pub fn efficient(rng: &mut impl Rng, dim: usize) -> EfficientProbeParams {
    let out = dim / 8;
    EfficientProbeParams::from_parts(
        matrix(rng, 4, out, 0.8),
        matrix(rng, out, dim, 0.5),
        matrix(rng, out, dim, 0.5),
        matrix(rng, 4, 4 * out, 0.5),
        vector(rng, 4, 0.5),
    )
    .unwrap()
}

fn loss<H: Head>(head: &H, t: &Tokens, mask: Option<&Array1<f64>>, label: usize) -> f64 {
    cross_entropy(head.forward(t, mask).unwrap().logits.view(), label).0
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over one gradient group. Per-entry ratios are
/// dominated by roundoff on entries near zero; the group norm is not.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Fourth-order central difference `f'(x)` from `f(x ± h)`, `f(x ± 2h)`.
fn derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Worst group relative error between analytic gradients (every parameter
/// tensor, patch tokens, special tokens) and finite differences with step `h`.
pub fn gradient_check<H: Head>(head: &H, t: &Tokens, mask: Option<&Array1<f64>>, label: usize, h: f64) -> f64 {
    let fwd = head.forward(t, mask).unwrap();
    let (_, dlogits) = cross_entropy(fwd.logits.view(), label);
    let grads = head.backward(&fwd.cache, dlogits.view()).unwrap();
    let mut worst: f64 = 0.0;

    let analytic: Vec<Vec<f64>> = grads.params.tensors().iter().map(|s| s.to_vec()).collect();
    for (ti, group) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..group.len())
            .map(|k| {
                derivative(
                    |d| {
                        let mut p = head.clone();
                        p.tensors_mut()[ti][k] += d;
                        loss(&p, t, mask, label)
                    },
                    h,
                )
            })
            .collect();
        worst = worst.max(rel_err(group, &numeric));
    }
    for (which, analytic) in [(0, &grads.patches), (1, &grads.specials)] {
        let numeric: Vec<f64> = analytic
            .indexed_iter()
            .map(|((i, j), _)| {
                derivative(
                    |d| {
                        let mut x = t.clone();
                        let m = if which == 0 { &mut x.patches } else { &mut x.specials };
                        m[[i, j]] += d;
                        loss(head, &x, mask, label)
                    },
                    h,
                )
            })
            .collect();
        worst = worst.max(rel_err(&analytic.iter().copied().collect::<Vec<_>>(), &numeric));
    }
    worst
}
