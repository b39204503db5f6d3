//! Log-domain forward-backward recursions and loss evaluation.
//!
//! Two lattices are supported over the same `T × (U+1)` state grid:
//!
//! - the conventional transducer, where a blank emission advances `t` by one
//!   and a token emission advances `u` at fixed `t`;
//! - the token-and-duration transducer, where every emission carries a
//!   duration `d` from a configured set and advances `t` by `d` (blank may
//!   not take `d = 0`).
//!
//! Conventions used throughout:
//!
//! - math indices are `t ∈ [1, T+1]`, `u ∈ [0, U]`; storage row `ti`
//!   corresponds to `t = ti + 1`, so the tables have `T+1` rows and the last
//!   row is the terminal column `t = T+1`;
//! - `α(1,0) = 1` and `β(T+1,U) = 1`; `α(T+1,u) = β(T+1,u) = 0` for `u ≠ U`;
//!   everything outside the grid is zero (−∞ in log domain);
//! - a path terminates exactly at `(T+1, U)`. A token emission landing on
//!   `T+1` ends the path; there is no mandatory trailing blank in the
//!   duration lattice. For the conventional lattice the final blank at
//!   `(T, U)` is the arc into the terminal row, which gives the same tables
//!   as the textbook `β(T,U) = P(∅|T,U)` base condition.
//!
//! All recursions run in the log domain with log-sum-exp; `f64` is the
//! default precision and the recursions are generic over `f32`/`f64`.

use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use crate::numeric::{log_softmax, logsumexp};
use crate::problem::JointProblem;
use ndarray::{Array2, Array3};
use num_traits::Float;

/// Split raw joint logits into token and duration log-probabilities.
///
/// The token block is a log-softmax over the `V+1` token slots minus `sigma`
/// (logit under-normalization; `sigma = 0` gives a proper distribution). The
/// duration block is a plain log-softmax over the `N_d` duration slots;
/// under-normalization never applies to durations.
pub fn split_log_probs(
    problem: &JointProblem,
    sigma: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(TdtError::InvalidArgument(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let (t_len, u_rows, _) = problem.logits().dim();
    let v_slots = problem.token_slots();
    let n_d = problem.durations().len();
    let mut token_lp = Array3::zeros((t_len, u_rows, v_slots));
    let mut dur_lp = Array3::zeros((t_len, u_rows, n_d));
    let logits = problem.logits();
    for ti in 0..t_len {
        for u in 0..u_rows {
            let row: Vec<f64> = (0..v_slots).map(|k| logits[[ti, u, k]]).collect();
            for (k, lp) in log_softmax(&row).into_iter().enumerate() {
                token_lp[[ti, u, k]] = lp - sigma;
            }
            let drow: Vec<f64> = (0..n_d).map(|j| logits[[ti, u, v_slots + j]]).collect();
            for (j, lp) in log_softmax(&drow).into_iter().enumerate() {
                dur_lp[[ti, u, j]] = lp;
            }
        }
    }
    Ok((token_lp, dur_lp))
}

fn check_token_shape<F: Float>(token_lp: &Array3<F>, targets: &[usize]) -> Result<()> {
    let (t_len, u_rows, v_slots) = token_lp.dim();
    if t_len == 0 {
        return Err(TdtError::EmptyInput);
    }
    if u_rows != targets.len() + 1 {
        return Err(TdtError::ShapeMismatch {
            what: "token log-probs",
            expected: vec![t_len, targets.len() + 1, v_slots],
            actual: vec![t_len, u_rows, v_slots],
        });
    }
    if v_slots < 2 {
        return Err(TdtError::InvalidArgument(
            "token block needs at least one real token and blank".into(),
        ));
    }
    for (index, &value) in targets.iter().enumerate() {
        if value >= v_slots - 1 {
            return Err(TdtError::InvalidTarget {
                index,
                value,
                vocab: v_slots - 1,
            });
        }
    }
    Ok(())
}

fn check_duration_shape<F: Float>(
    token_lp: &Array3<F>,
    dur_lp: &Array3<F>,
    durations: &DurationSet,
) -> Result<()> {
    let (t_len, u_rows, _) = token_lp.dim();
    let (dt, du, dn) = dur_lp.dim();
    if dt != t_len || du != u_rows || dn != durations.len() {
        return Err(TdtError::ShapeMismatch {
            what: "duration log-probs",
            expected: vec![t_len, u_rows, durations.len()],
            actual: vec![dt, du, dn],
        });
    }
    Ok(())
}

/// Forward variables of the conventional lattice.
///
/// Returns a `(T+1) × (U+1)` table; `alpha[[T, U]]` is the total
/// log-probability (the arc into the terminal row is the final blank).
pub fn rnnt_forward<F: Float>(token_lp: &Array3<F>, targets: &[usize]) -> Result<Array2<F>> {
    check_token_shape(token_lp, targets)?;
    let (t_len, _, v_slots) = token_lp.dim();
    let u_len = targets.len();
    let blank = v_slots - 1;

    let mut alpha = Array2::from_elem((t_len + 1, u_len + 1), F::neg_infinity());
    alpha[[0, 0]] = F::zero();
    let mut terms: Vec<F> = Vec::with_capacity(2);
    for ti in 0..t_len {
        for u in 0..=u_len {
            if ti == 0 && u == 0 {
                continue;
            }
            terms.clear();
            if ti > 0 {
                terms.push(alpha[[ti - 1, u]] + token_lp[[ti - 1, u, blank]]);
            }
            if u > 0 {
                terms.push(alpha[[ti, u - 1]] + token_lp[[ti, u - 1, targets[u - 1]]]);
            }
            alpha[[ti, u]] = logsumexp(&terms);
        }
    }
    alpha[[t_len, u_len]] = alpha[[t_len - 1, u_len]] + token_lp[[t_len - 1, u_len, blank]];
    Ok(alpha)
}

/// Backward variables of the conventional lattice, same shape as
/// [`rnnt_forward`]; `beta[[0, 0]]` is the total log-probability.
pub fn rnnt_backward<F: Float>(token_lp: &Array3<F>, targets: &[usize]) -> Result<Array2<F>> {
    check_token_shape(token_lp, targets)?;
    let (t_len, _, v_slots) = token_lp.dim();
    let u_len = targets.len();
    let blank = v_slots - 1;

    let mut beta = Array2::from_elem((t_len + 1, u_len + 1), F::neg_infinity());
    beta[[t_len, u_len]] = F::zero();
    let mut terms: Vec<F> = Vec::with_capacity(2);
    for ti in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            terms.clear();
            terms.push(beta[[ti + 1, u]] + token_lp[[ti, u, blank]]);
            if u < u_len {
                terms.push(beta[[ti, u + 1]] + token_lp[[ti, u, targets[u]]]);
            }
            beta[[ti, u]] = logsumexp(&terms);
        }
    }
    Ok(beta)
}

/// Forward variables of the duration lattice.
///
/// Each state `(t, u)` accumulates blank arcs from `(t−d, u)` over
/// `d ∈ 𝒟 \ {0}` and token arcs from `(t−d, u−1)` over `d ∈ 𝒟`, weighted by
/// the emitting state's token and duration log-probabilities. Durations that
/// would leave the grid contribute nothing. `alpha[[T, U]]` (the terminal
/// node) is the total log-probability.
pub fn tdt_forward<F: Float>(
    token_lp: &Array3<F>,
    dur_lp: &Array3<F>,
    targets: &[usize],
    durations: &DurationSet,
) -> Result<Array2<F>> {
    check_token_shape(token_lp, targets)?;
    check_duration_shape(token_lp, dur_lp, durations)?;
    let (t_len, _, v_slots) = token_lp.dim();
    let u_len = targets.len();
    let blank = v_slots - 1;

    let mut alpha = Array2::from_elem((t_len + 1, u_len + 1), F::neg_infinity());
    alpha[[0, 0]] = F::zero();
    let mut terms: Vec<F> = Vec::with_capacity(2 * durations.len());
    for ti in 0..=t_len {
        for u in 0..=u_len {
            if ti == 0 && u == 0 {
                continue;
            }
            if ti == t_len && u != u_len {
                continue; // terminal row accepts only the completed target
            }
            terms.clear();
            for (di, d) in durations.iter().enumerate() {
                if d == 0 || d > ti {
                    continue;
                }
                let src = ti - d;
                terms.push(alpha[[src, u]] + token_lp[[src, u, blank]] + dur_lp[[src, u, di]]);
            }
            if u > 0 {
                let y = targets[u - 1];
                for (di, d) in durations.iter().enumerate() {
                    if d > ti {
                        continue;
                    }
                    let src = ti - d;
                    if src == t_len {
                        continue; // no frame exists at t = T+1 to emit from
                    }
                    terms.push(
                        alpha[[src, u - 1]] + token_lp[[src, u - 1, y]] + dur_lp[[src, u - 1, di]],
                    );
                }
            }
            alpha[[ti, u]] = logsumexp(&terms);
        }
    }
    Ok(alpha)
}

/// Backward variables of the duration lattice; `beta[[0, 0]]` equals the
/// terminal forward value up to roundoff.
pub fn tdt_backward<F: Float>(
    token_lp: &Array3<F>,
    dur_lp: &Array3<F>,
    targets: &[usize],
    durations: &DurationSet,
) -> Result<Array2<F>> {
    check_token_shape(token_lp, targets)?;
    check_duration_shape(token_lp, dur_lp, durations)?;
    let (t_len, _, v_slots) = token_lp.dim();
    let u_len = targets.len();
    let blank = v_slots - 1;

    let mut beta = Array2::from_elem((t_len + 1, u_len + 1), F::neg_infinity());
    beta[[t_len, u_len]] = F::zero();
    let mut terms: Vec<F> = Vec::with_capacity(2 * durations.len());
    for ti in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            terms.clear();
            for (di, d) in durations.iter().enumerate() {
                if d == 0 || ti + d > t_len {
                    continue;
                }
                terms.push(beta[[ti + d, u]] + token_lp[[ti, u, blank]] + dur_lp[[ti, u, di]]);
            }
            if u < u_len {
                let y = targets[u];
                for (di, d) in durations.iter().enumerate() {
                    if ti + d > t_len {
                        continue;
                    }
                    terms.push(beta[[ti + d, u + 1]] + token_lp[[ti, u, y]] + dur_lp[[ti, u, di]]);
                }
            }
            beta[[ti, u]] = logsumexp(&terms);
        }
    }
    Ok(beta)
}

/// Forward and backward tables of one lattice instance.
///
/// `alpha` and `beta` are `(T+1) × (U+1)` log-domain tables; the last row is
/// the terminal column `t = T+1`. `total_log_prob` is read off the forward
/// table at the terminal node and agrees with `beta[[0, 0]]` up to roundoff.
#[derive(Debug, Clone)]
pub struct LatticeTables {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub frames: usize,
    pub total_log_prob: f64,
}

/// Both tables for the conventional lattice.
pub fn rnnt_tables(token_lp: &Array3<f64>, targets: &[usize]) -> Result<LatticeTables> {
    let alpha = rnnt_forward(token_lp, targets)?;
    let beta = rnnt_backward(token_lp, targets)?;
    let frames = token_lp.dim().0;
    let total_log_prob = alpha[[frames, targets.len()]];
    Ok(LatticeTables {
        alpha,
        beta,
        frames,
        total_log_prob,
    })
}

/// Both tables for the duration lattice.
pub fn tdt_tables(
    token_lp: &Array3<f64>,
    dur_lp: &Array3<f64>,
    targets: &[usize],
    durations: &DurationSet,
) -> Result<LatticeTables> {
    let alpha = tdt_forward(token_lp, dur_lp, targets, durations)?;
    let beta = tdt_backward(token_lp, dur_lp, targets, durations)?;
    let frames = token_lp.dim().0;
    let total_log_prob = alpha[[frames, targets.len()]];
    Ok(LatticeTables {
        alpha,
        beta,
        frames,
        total_log_prob,
    })
}

/// Negative log-probability of the target under the conventional lattice.
///
/// With `sigma > 0` the under-normalized token scores feed the same
/// recursion and the result is a negative log *pseudo*-probability.
pub fn rnnt_loss(problem: &JointProblem, sigma: f64) -> Result<f64> {
    let (token_lp, _) = split_log_probs(problem, sigma)?;
    let alpha = rnnt_forward(&token_lp, problem.targets())?;
    Ok(-alpha[[problem.frames(), problem.target_len()]])
}

/// Negative log-probability of the target under the duration lattice.
pub fn tdt_loss(problem: &JointProblem, sigma: f64) -> Result<f64> {
    let (token_lp, dur_lp) = split_log_probs(problem, sigma)?;
    let alpha = tdt_forward(&token_lp, &dur_lp, problem.targets(), problem.durations())?;
    Ok(-alpha[[problem.frames(), problem.target_len()]])
}

/// Per-state alignment posterior, `T × (U+1)` (the terminal row carries no
/// emission and is dropped).
///
/// `raw[[ti, u]] = log α + log β` is the log of the probability mass flowing
/// through state `(ti+1, u)`; `normalized` subtracts the total log-probability
/// and is clamped at 0, since a single state can never carry more than the
/// whole mass (any positive excess is roundoff).
#[derive(Debug, Clone)]
pub struct AlignmentPosterior {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

pub fn alignment_posterior(tables: &LatticeTables) -> AlignmentPosterior {
    let t_len = tables.frames;
    let u_rows = tables.alpha.dim().1;
    let total = tables.total_log_prob;
    let mut raw = Array2::from_elem((t_len, u_rows), f64::NEG_INFINITY);
    let mut normalized = raw.clone();
    for ti in 0..t_len {
        for u in 0..u_rows {
            let r = tables.alpha[[ti, u]] + tables.beta[[ti, u]];
            raw[[ti, u]] = r;
            normalized[[ti, u]] = if r == f64::NEG_INFINITY || !total.is_finite() {
                f64::NEG_INFINITY
            } else {
                (r - total).min(0.0)
            };
        }
    }
    AlignmentPosterior { raw, normalized }
}

fn residual(diagonal_sum: f64, total: f64) -> f64 {
    if diagonal_sum == f64::NEG_INFINITY && total == f64::NEG_INFINITY {
        0.0 // an unreachable target: both sides carry zero mass
    } else {
        (diagonal_sum - total).abs()
    }
}

/// Verify that the mass crossing diagonal `t + u = n` of the conventional
/// lattice equals the total probability. Returns the absolute log-domain
/// residual; `n` must lie in `[1, T+U]`.
pub fn rnnt_diagonal_residual(problem: &JointProblem, sigma: f64, n: usize) -> Result<f64> {
    let t_len = problem.frames();
    let u_len = problem.target_len();
    if n < 1 || n > t_len + u_len {
        return Err(TdtError::InvalidArgument(format!(
            "diagonal {n} out of range [1, {}]",
            t_len + u_len
        )));
    }
    let (token_lp, _) = split_log_probs(problem, sigma)?;
    let tables = rnnt_tables(&token_lp, problem.targets())?;
    let mut terms = Vec::new();
    for t in 1..=t_len.min(n) {
        let u = n - t;
        if u <= u_len {
            terms.push(tables.alpha[[t - 1, u]] + tables.beta[[t - 1, u]]);
        }
    }
    Ok(residual(logsumexp(&terms), tables.total_log_prob))
}

/// Verify the duration-lattice diagonal identity for diagonal `t + u = n`.
///
/// Because emissions may skip frames, the on-diagonal mass `Σ α·β` is
/// completed by two cross-diagonal sums: blank arcs `(t,u) → (t+d,u)` and
/// token arcs `(t,u) → (t+d,u+1)` that start strictly below the diagonal and
/// land strictly above it. Returns the absolute log-domain residual.
pub fn tdt_diagonal_residual(problem: &JointProblem, sigma: f64, n: usize) -> Result<f64> {
    let t_len = problem.frames();
    let u_len = problem.target_len();
    if n < 1 || n > t_len + u_len {
        return Err(TdtError::InvalidArgument(format!(
            "diagonal {n} out of range [1, {}]",
            t_len + u_len
        )));
    }
    let (token_lp, dur_lp) = split_log_probs(problem, sigma)?;
    let tables = tdt_tables(&token_lp, &dur_lp, problem.targets(), problem.durations())?;
    let blank = problem.blank();
    let targets = problem.targets();
    let durations = problem.durations();

    let mut terms = Vec::new();
    for t in 1..=(t_len + 1).min(n) {
        let u = n - t;
        if u <= u_len {
            terms.push(tables.alpha[[t - 1, u]] + tables.beta[[t - 1, u]]);
        }
    }
    for t in 1..=t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[t - 1, u]];
            if la == f64::NEG_INFINITY || t + u >= n {
                continue;
            }
            for (di, d) in durations.iter().enumerate() {
                let t2 = t + d;
                if t2 > t_len + 1 {
                    continue;
                }
                if d > 0 && t2 + u > n {
                    terms.push(
                        la + token_lp[[t - 1, u, blank]]
                            + dur_lp[[t - 1, u, di]]
                            + tables.beta[[t2 - 1, u]],
                    );
                }
                if u < u_len && t2 + u + 1 > n {
                    terms.push(
                        la + token_lp[[t - 1, u, targets[u]]]
                            + dur_lp[[t - 1, u, di]]
                            + tables.beta[[t2 - 1, u + 1]],
                    );
                }
            }
        }
    }
    Ok(residual(logsumexp(&terms), tables.total_log_prob))
}
