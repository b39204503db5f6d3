//! Log-domain accumulation primitives.
//!
//! Everything downstream (forward-backward recursions, path enumeration,
//! diagonal identities) sums probabilities in the log domain. The one rule
//! that matters: an empty or all-`-inf` sum is `-inf`, never NaN, so that
//! zero-probability states stay absorbing.

use num_traits::Float;

/// log(exp(a) + exp(b)) without leaving the log domain.
pub fn logaddexp<F: Float>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log Σ exp(x_i) over a slice. Empty or all-(-inf) input gives -inf.
pub fn logsumexp<F: Float>(xs: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == F::neg_infinity() {
        return F::neg_infinity();
    }
    let mut sum = F::zero();
    for &x in xs {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

/// Pairwise (tree-shaped) log-sum-exp reduction.
///
/// For long lists of similar-magnitude terms this keeps the accumulation
/// error at O(log n) roundings instead of O(n); used by the enumeration
/// oracle, which may fold up to a million path scores.
pub fn pairwise_logsumexp<F: Float>(xs: &[F]) -> F {
    match xs.len() {
        0 => F::neg_infinity(),
        1 => xs[0],
        2 => logaddexp(xs[0], xs[1]),
        n => {
            let mid = n / 2;
            logaddexp(pairwise_logsumexp(&xs[..mid]), pairwise_logsumexp(&xs[mid..]))
        }
    }
}

/// log-softmax over a slice, returned as a new vector.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let z = logsumexp(xs);
    xs.iter().map(|&x| x - z).collect()
}
