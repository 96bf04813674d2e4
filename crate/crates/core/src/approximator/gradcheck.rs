use rand::seq::index;
use rand::Rng;

/// Absolute floor of the relative-error denominator; gradients smaller than
/// this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `loss` against five-point
/// central differences with step `step` on the listed parameter indices. Returns the
/// largest relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], indices: &[usize], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(params);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = probe[i];
        let mut at = |k: f64| {
            probe[i] = orig + k * step;
            loss(&probe).0
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        probe[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// `count` distinct indices below `len`, sorted.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    let mut out = index::sample(rng, len, count.min(len)).into_vec();
    out.sort_unstable();
    out
}
