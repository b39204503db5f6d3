//! Closed-form gradients of both transducer losses.
//!
//! Gradients are produced at two levels:
//!
//! - with respect to the token / duration *probabilities* treated as free
//!   variables (`*_grad_token_probs`, `*_grad_duration_probs`), which is
//!   where the forward-backward decomposition lives;
//! - with respect to the raw *pre-softmax logits* (`*_grad_token_logits`,
//!   `*_grad_duration_logits`), with the softmax Jacobian merged analytically
//!   into the loss gradient so no explicit Jacobian product is needed.
//!
//! The merged token form, for state `(t, u)` and token `v`, is
//!
//! ```text
//! ∂L/∂h(v) = P(v) · α(t,u) · [ β(t,u) − b(v,t,u) / exp(σ) ] / P'(y|x)
//! ```
//!
//! where `b(v,t,u)` is the duration-weighted sum of reachable `β` values
//! (token arcs for `v = y_{u+1}`, blank arcs with `d ≥ 1` for `v = ∅`, zero
//! otherwise), `P(v)` is the *properly normalized* token probability, and
//! `α`, `β`, `P'` come from the under-normalized recursion when `σ > 0`.
//! At `σ = 0` this reduces to the plain function-merged gradient.
//!
//! FastEmit scales the probability-level gradient of every non-blank token
//! by `1 + λ` before the softmax merge; carrying that scale through the
//! derivation adds one term and keeps the per-state token gradient zero-sum:
//!
//! ```text
//! ∂L/∂h(v) = P(v)·α/P' · [ β + λ·b(y)·P'(y) − s(v)·b(v)/exp(σ) ]
//! ```
//!
//! with `s(v) = 1 + λ` for non-blank `v` and `1` for blank.
//!
//! Every product of lattice quantities is assembled inside a single `exp`
//! of summed logs, so no intermediate factor can overflow even when the
//! individual probabilities underflow `f64`.

use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use crate::lattice::{rnnt_tables, split_log_probs, tdt_tables, LatticeTables};
use crate::numeric::logsumexp;
use crate::problem::JointProblem;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Knobs shared by the gradient entry points.
///
/// `rng_seed` seeds the Bernoulli draw of [`sampled_loss_grad`] when the
/// caller builds its generator via [`GradOptions::rng`]; the draw itself is
/// owned by the caller so determinism stays under the caller's control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradOptions {
    pub sigma: f64,
    pub fastemit_lambda: f64,
    pub omega: f64,
    pub rng_seed: u64,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            fastemit_lambda: 0.0,
            omega: 0.0,
            rng_seed: 0,
        }
    }
}

impl GradOptions {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(TdtError::InvalidArgument(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.fastemit_lambda < 0.0 || !self.fastemit_lambda.is_finite() {
            return Err(TdtError::InvalidArgument(format!(
                "fastemit lambda must be finite and >= 0, got {}",
                self.fastemit_lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(TdtError::InvalidArgument(format!(
                "omega must lie in [0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }

    /// Generator for the sampled-loss Bernoulli draws.
    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

/// Loss value plus per-state gradients for the raw logit tensor.
///
/// Both gradient blocks are zero-sum over their last axis at every `(t, u)`:
/// softmax-merged gradients redistribute mass, they never create it.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub token_logit_grad: Array3<f64>,
    pub duration_logit_grad: Array3<f64>,
    pub loss: f64,
}

/// Which branch the sampled loss took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampledBranch {
    Rnnt,
    Tdt,
}

/// `b(v, t, u)` for the two live token rows, in log domain:
/// `log_b_token[[ti, u]]` sums token arcs, `log_b_blank[[ti, u]]` blank arcs.
struct BetaWeights {
    log_b_token: Array2<f64>,
    log_b_blank: Array2<f64>,
}

fn beta_weights(
    beta: &Array2<f64>,
    dur_lp: &Array3<f64>,
    u_len: usize,
    durations: &DurationSet,
) -> BetaWeights {
    let t_len = dur_lp.dim().0;
    let mut log_b_token = Array2::from_elem((t_len, u_len + 1), NEG_INF);
    let mut log_b_blank = log_b_token.clone();
    let mut terms = Vec::with_capacity(durations.len());
    for ti in 0..t_len {
        for u in 0..=u_len {
            if u < u_len {
                terms.clear();
                for (di, d) in durations.iter().enumerate() {
                    if ti + d <= t_len {
                        terms.push(beta[[ti + d, u + 1]] + dur_lp[[ti, u, di]]);
                    }
                }
                log_b_token[[ti, u]] = logsumexp(&terms);
            }
            terms.clear();
            for (di, d) in durations.iter().enumerate() {
                if d >= 1 && ti + d <= t_len {
                    terms.push(beta[[ti + d, u]] + dur_lp[[ti, u, di]]);
                }
            }
            log_b_blank[[ti, u]] = logsumexp(&terms);
        }
    }
    BetaWeights {
        log_b_token,
        log_b_blank,
    }
}

/// Gradient of the duration-lattice loss with respect to the token
/// probabilities `P_T(v|t,u)` treated as free variables.
///
/// `tables` must come from the σ = 0 recursion (true probabilities). The
/// entry is `−α(t,u)·b(v,t,u)/P(y|x)` for `v ∈ {y_{u+1}, ∅}` and exactly
/// zero otherwise. `token_slots` is the width of the token block, V+1 (the
/// tables alone do not carry it).
pub fn tdt_grad_token_probs(
    tables: &LatticeTables,
    dur_lp: &Array3<f64>,
    targets: &[usize],
    durations: &DurationSet,
    token_slots: usize,
) -> Result<Array3<f64>> {
    let t_len = tables.frames;
    let u_len = targets.len();
    let total = tables.total_log_prob;
    if !total.is_finite() {
        return Err(TdtError::NonFiniteLoss { step: None });
    }
    let blank = token_slots - 1;
    let w = beta_weights(&tables.beta, dur_lp, u_len, durations);
    let mut grad = Array3::zeros((t_len, u_len + 1, token_slots));
    for ti in 0..t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[ti, u]];
            if la == NEG_INF {
                continue;
            }
            if u < u_len {
                grad[[ti, u, targets[u]]] = -(la + w.log_b_token[[ti, u]] - total).exp();
            }
            grad[[ti, u, blank]] = -(la + w.log_b_blank[[ti, u]] - total).exp();
        }
    }
    Ok(grad)
}

/// Gradient of the duration-lattice loss with respect to the duration
/// probabilities `P_D(d|t,u)` treated as free variables (σ = 0 tables).
///
/// The `d = 0` entry never carries a blank term: blank cannot take duration
/// zero, so only the token arc contributes there.
pub fn tdt_grad_duration_probs(
    tables: &LatticeTables,
    token_lp: &Array3<f64>,
    targets: &[usize],
    durations: &DurationSet,
) -> Result<Array3<f64>> {
    let t_len = tables.frames;
    let u_len = targets.len();
    let total = tables.total_log_prob;
    if !total.is_finite() {
        return Err(TdtError::NonFiniteLoss { step: None });
    }
    let blank = token_lp.dim().2 - 1;
    let mut grad = Array3::zeros((t_len, u_len + 1, durations.len()));
    for ti in 0..t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[ti, u]];
            if la == NEG_INF {
                continue;
            }
            for (di, d) in durations.iter().enumerate() {
                let lc = log_c(tables, token_lp, targets, ti, u, d, blank, t_len, u_len);
                grad[[ti, u, di]] = -(la + lc - total).exp();
            }
        }
    }
    Ok(grad)
}

/// `log c(d, t, u)`: the β-weighted emission context of one duration slot.
#[allow(clippy::too_many_arguments)]
fn log_c(
    tables: &LatticeTables,
    token_lp: &Array3<f64>,
    targets: &[usize],
    ti: usize,
    u: usize,
    d: usize,
    blank: usize,
    t_len: usize,
    u_len: usize,
) -> f64 {
    if d == 0 {
        if u < u_len {
            tables.beta[[ti, u + 1]] + token_lp[[ti, u, targets[u]]]
        } else {
            NEG_INF
        }
    } else if ti + d > t_len {
        NEG_INF
    } else {
        let token = if u < u_len {
            tables.beta[[ti + d, u + 1]] + token_lp[[ti, u, targets[u]]]
        } else {
            NEG_INF
        };
        let blank_term = tables.beta[[ti + d, u]] + token_lp[[ti, u, blank]];
        logsumexp(&[token, blank_term])
    }
}

/// Scale non-blank probability-level token gradients by `1 + λ`, leaving
/// blank untouched. The blank is the last slot of the token axis. `λ = 0`
/// returns the input unchanged.
pub fn apply_fastemit(prob_grad: &Array3<f64>, lambda: f64) -> Result<Array3<f64>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(TdtError::InvalidArgument(format!(
            "fastemit lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let mut out = prob_grad.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let blank = prob_grad.dim().2 - 1;
    for ((_, _, v), g) in out.indexed_iter_mut() {
        if v != blank {
            *g *= 1.0 + lambda;
        }
    }
    Ok(out)
}

fn assemble_tdt_token_grad(
    tables: &LatticeTables,
    real_token_lp: &Array3<f64>,
    w: &BetaWeights,
    targets: &[usize],
    sigma: f64,
    lambda: f64,
) -> Array3<f64> {
    let (t_len, u_rows, v_slots) = real_token_lp.dim();
    let u_len = u_rows - 1;
    let blank = v_slots - 1;
    let total = tables.total_log_prob;
    let mut grad = Array3::zeros((t_len, u_rows, v_slots));
    for ti in 0..t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[ti, u]];
            if la == NEG_INF {
                continue;
            }
            let lbeta = tables.beta[[ti, u]];
            // λ correction: the token-row prob-gradient is scaled by (1+λ),
            // which adds λ·b(y)·P'(y) inside the bracket for every v.
            let fastemit_term = if lambda > 0.0 && u < u_len {
                let lp_pseudo_y = real_token_lp[[ti, u, targets[u]]] - sigma;
                lambda * (la + w.log_b_token[[ti, u]] + lp_pseudo_y - total).exp()
            } else {
                0.0
            };
            for v in 0..v_slots {
                let lp_v = real_token_lp[[ti, u, v]];
                let main = (lp_v + la + lbeta - total).exp();
                let (lb_v, scale) = if u < u_len && v == targets[u] {
                    (w.log_b_token[[ti, u]], 1.0 + lambda)
                } else if v == blank {
                    (w.log_b_blank[[ti, u]], 1.0)
                } else {
                    (NEG_INF, 1.0)
                };
                let pulled = scale * (lp_v + la + lb_v - sigma - total).exp();
                grad[[ti, u, v]] = main + lp_v.exp() * fastemit_term - pulled;
            }
        }
    }
    grad
}

fn assemble_duration_grad(
    tables: &LatticeTables,
    pseudo_token_lp: &Array3<f64>,
    dur_lp: &Array3<f64>,
    targets: &[usize],
    durations: &DurationSet,
) -> Array3<f64> {
    let t_len = tables.frames;
    let u_len = targets.len();
    let n_d = durations.len();
    let blank = pseudo_token_lp.dim().2 - 1;
    let total = tables.total_log_prob;
    let mut grad = Array3::zeros((t_len, u_len + 1, n_d));
    let mut a = vec![0.0; n_d];
    for ti in 0..t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[ti, u]];
            if la == NEG_INF {
                continue;
            }
            // prob-level gradient folded with P_D: A(j) = P_D(j) · ∂L/∂P_D(j)
            let mut s = 0.0;
            for (di, d) in durations.iter().enumerate() {
                let lc = log_c(
                    tables,
                    pseudo_token_lp,
                    targets,
                    ti,
                    u,
                    d,
                    blank,
                    t_len,
                    u_len,
                );
                a[di] = -(dur_lp[[ti, u, di]] + la + lc - total).exp();
                s += a[di];
            }
            // softmax backward: grad(j) = A(j) − P_D(j) · Σ_k A(k)
            for di in 0..n_d {
                grad[[ti, u, di]] = a[di] - dur_lp[[ti, u, di]].exp() * s;
            }
        }
    }
    grad
}

/// Loss and merged logit gradients of the duration-lattice loss.
///
/// Honors `options.sigma` (under-normalized recursion, real-probability
/// prefactor) and `options.fastemit_lambda`.
pub fn tdt_grad_bundle(problem: &JointProblem, options: &GradOptions) -> Result<GradientBundle> {
    options.validate()?;
    let sigma = options.sigma;
    let lambda = options.fastemit_lambda;
    let (real_token_lp, dur_lp) = split_log_probs(problem, 0.0)?;
    let pseudo_token_lp = if sigma == 0.0 {
        real_token_lp.clone()
    } else {
        real_token_lp.mapv(|x| x - sigma)
    };
    let tables = tdt_tables(
        &pseudo_token_lp,
        &dur_lp,
        problem.targets(),
        problem.durations(),
    )?;
    if !tables.total_log_prob.is_finite() {
        return Err(TdtError::NonFiniteLoss { step: None });
    }
    let w = beta_weights(
        &tables.beta,
        &dur_lp,
        problem.target_len(),
        problem.durations(),
    );
    let token_logit_grad =
        assemble_tdt_token_grad(&tables, &real_token_lp, &w, problem.targets(), sigma, lambda);
    let duration_logit_grad = assemble_duration_grad(
        &tables,
        &pseudo_token_lp,
        &dur_lp,
        problem.targets(),
        problem.durations(),
    );
    Ok(GradientBundle {
        token_logit_grad,
        duration_logit_grad,
        loss: -tables.total_log_prob,
    })
}

/// Merged token-logit gradient of the duration-lattice loss.
pub fn tdt_grad_token_logits(
    problem: &JointProblem,
    options: &GradOptions,
) -> Result<Array3<f64>> {
    Ok(tdt_grad_bundle(problem, options)?.token_logit_grad)
}

/// Duration-logit gradient of the duration-lattice loss: the probability
/// gradient chained through the duration softmax Jacobian.
pub fn tdt_grad_duration_logits(
    problem: &JointProblem,
    options: &GradOptions,
) -> Result<Array3<f64>> {
    Ok(tdt_grad_bundle(problem, options)?.duration_logit_grad)
}

/// Loss and merged token-logit gradient of the conventional transducer loss.
/// The duration block of the bundle is identically zero: the conventional
/// loss never touches duration logits.
pub fn rnnt_grad_bundle(problem: &JointProblem, options: &GradOptions) -> Result<GradientBundle> {
    options.validate()?;
    let sigma = options.sigma;
    let lambda = options.fastemit_lambda;
    let (real_token_lp, _) = split_log_probs(problem, 0.0)?;
    let pseudo_token_lp = if sigma == 0.0 {
        real_token_lp.clone()
    } else {
        real_token_lp.mapv(|x| x - sigma)
    };
    let tables = rnnt_tables(&pseudo_token_lp, problem.targets())?;
    if !tables.total_log_prob.is_finite() {
        return Err(TdtError::NonFiniteLoss { step: None });
    }
    let (t_len, u_rows, v_slots) = real_token_lp.dim();
    let u_len = u_rows - 1;
    let blank = v_slots - 1;
    let targets = problem.targets();
    let total = tables.total_log_prob;
    let mut grad = Array3::zeros((t_len, u_rows, v_slots));
    for ti in 0..t_len {
        for u in 0..=u_len {
            let la = tables.alpha[[ti, u]];
            if la == NEG_INF {
                continue;
            }
            let lbeta = tables.beta[[ti, u]];
            let lr_token = if u < u_len {
                tables.beta[[ti, u + 1]]
            } else {
                NEG_INF
            };
            let lr_blank = tables.beta[[ti + 1, u]];
            let fastemit_term = if lambda > 0.0 && u < u_len {
                let lp_pseudo_y = real_token_lp[[ti, u, targets[u]]] - sigma;
                lambda * (la + lr_token + lp_pseudo_y - total).exp()
            } else {
                0.0
            };
            for v in 0..v_slots {
                let lp_v = real_token_lp[[ti, u, v]];
                let main = (lp_v + la + lbeta - total).exp();
                let (lr_v, scale) = if u < u_len && v == targets[u] {
                    (lr_token, 1.0 + lambda)
                } else if v == blank {
                    (lr_blank, 1.0)
                } else {
                    (NEG_INF, 1.0)
                };
                let pulled = scale * (lp_v + la + lr_v - sigma - total).exp();
                grad[[ti, u, v]] = main + lp_v.exp() * fastemit_term - pulled;
            }
        }
    }
    Ok(GradientBundle {
        token_logit_grad: grad,
        duration_logit_grad: Array3::zeros((t_len, u_rows, problem.durations().len())),
        loss: -total,
    })
}

/// Merged token-logit gradient of the conventional transducer loss
/// (`options.sigma = 0` gives the textbook function-merged form).
pub fn rnnt_grad_token_logits(
    problem: &JointProblem,
    options: &GradOptions,
) -> Result<Array3<f64>> {
    Ok(rnnt_grad_bundle(problem, options)?.token_logit_grad)
}

/// Stochastic mixture of the two losses: with probability `options.omega`
/// the conventional loss (token logits only, zero duration gradient),
/// otherwise the duration-lattice loss. One Bernoulli draw per call, taken
/// from the caller-owned generator.
pub fn sampled_loss_grad<R: Rng + ?Sized>(
    problem: &JointProblem,
    options: &GradOptions,
    rng: &mut R,
) -> Result<(f64, GradientBundle, SampledBranch)> {
    options.validate()?;
    let draw: f64 = rng.gen();
    if draw < options.omega {
        let bundle = rnnt_grad_bundle(problem, options)?;
        Ok((bundle.loss, bundle, SampledBranch::Rnnt))
    } else {
        let bundle = tdt_grad_bundle(problem, options)?;
        Ok((bundle.loss, bundle, SampledBranch::Tdt))
    }
}
