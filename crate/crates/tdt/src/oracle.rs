//! Brute-force references for the dynamic-programming and gradient paths.
//!
//! Nothing here is a performance path. `enumerate_rnnt` / `enumerate_tdt`
//! walk every complete lattice path and fold the scores with pairwise
//! log-sum-exp; `finite_diff` is plain central differences. These are the
//! independent ground truth the fast implementations are tested against.

use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use crate::lattice::split_log_probs;
use crate::numeric::pairwise_logsumexp;
use crate::problem::JointProblem;
use ndarray::{Array2, Array3};

/// Refuse to enumerate more paths than this by default.
pub const DEFAULT_PATH_CAP: u64 = 1_000_000;

/// Keep per-path records only when the instance has at most this many paths.
const PATH_LIST_CAP: u64 = 10_000;

/// One complete path: the emitted symbols (blank included) with their
/// durations, and the path's log-score.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub log_score: f64,
}

impl PathRecord {
    /// Debug dump line: `tokens;durations;logscore`.
    pub fn to_line(&self) -> String {
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{};{};{}",
            join(&self.symbols),
            join(&self.durations),
            self.log_score
        )
    }
}

/// Result of exhaustive enumeration.
#[derive(Debug, Clone)]
pub struct PathEnumeration {
    pub total_log_prob: f64,
    pub path_count: u64,
    /// Populated only for instances with at most `PATH_LIST_CAP` paths.
    pub paths: Option<Vec<PathRecord>>,
}

impl PathEnumeration {
    pub fn dump_lines(&self) -> Option<Vec<String>> {
        self.paths
            .as_ref()
            .map(|ps| ps.iter().map(PathRecord::to_line).collect())
    }
}

/// Count complete conventional-lattice paths without enumerating them.
/// Saturates at `u64::MAX` on overflow (which always exceeds any sane cap).
fn count_rnnt_paths(t_len: usize, u_len: usize) -> u64 {
    // Paths from (1,0) to (T,U) followed by the mandatory final blank:
    // counted by the same DP the enumeration walks.
    let mut counts = Array2::<u64>::zeros((t_len, u_len + 1));
    counts[[0, 0]] = 1;
    for ti in 0..t_len {
        for u in 0..=u_len {
            if ti == 0 && u == 0 {
                continue;
            }
            let from_blank = if ti > 0 { counts[[ti - 1, u]] } else { 0 };
            let from_token = if u > 0 { counts[[ti, u - 1]] } else { 0 };
            counts[[ti, u]] = from_blank.saturating_add(from_token);
        }
    }
    counts[[t_len - 1, u_len]]
}

/// Count complete duration-lattice paths.
fn count_tdt_paths(t_len: usize, u_len: usize, durations: &DurationSet) -> u64 {
    let mut counts = Array2::<u64>::zeros((t_len + 1, u_len + 1));
    counts[[0, 0]] = 1;
    for ti in 0..=t_len {
        for u in 0..=u_len {
            if ti == 0 && u == 0 {
                continue;
            }
            if ti == t_len && u != u_len {
                continue;
            }
            let mut c: u64 = 0;
            for d in durations.iter() {
                if d >= 1 && d <= ti {
                    c = c.saturating_add(counts[[ti - d, u]]);
                }
                if u > 0 && d <= ti && ti - d < t_len {
                    c = c.saturating_add(counts[[ti - d, u - 1]]);
                }
            }
            counts[[ti, u]] = c;
        }
    }
    counts[[t_len, u_len]]
}

struct RnntWalk<'a> {
    token_lp: &'a Array3<f64>,
    targets: &'a [usize],
    blank: usize,
    t_len: usize,
    record: bool,
    symbols: Vec<usize>,
    durations: Vec<usize>,
    scores: Vec<f64>,
    paths: Vec<PathRecord>,
}

impl RnntWalk<'_> {
    /// Depth-first over states (ti is 0-based, `ti == t_len` is terminal).
    fn visit(&mut self, ti: usize, u: usize, score: f64) {
        if ti == self.t_len {
            if u == self.targets.len() {
                self.scores.push(score);
                if self.record {
                    self.paths.push(PathRecord {
                        symbols: self.symbols.clone(),
                        durations: self.durations.clone(),
                        log_score: score,
                    });
                }
            }
            return;
        }
        // blank: advances t by one (duration 1 by convention)
        self.symbols.push(self.blank);
        self.durations.push(1);
        self.visit(ti + 1, u, score + self.token_lp[[ti, u, self.blank]]);
        self.symbols.pop();
        self.durations.pop();
        // token: consumes no frames (duration 0 by convention)
        if u < self.targets.len() {
            let y = self.targets[u];
            self.symbols.push(y);
            self.durations.push(0);
            self.visit(ti, u + 1, score + self.token_lp[[ti, u, y]]);
            self.symbols.pop();
            self.durations.pop();
        }
    }
}

/// Exhaustively sum over every blank-augmented sequence of the conventional
/// lattice. Refuses (never truncates) when the path count exceeds `cap`.
pub fn enumerate_rnnt(problem: &JointProblem, sigma: f64, cap: u64) -> Result<PathEnumeration> {
    let path_count = count_rnnt_paths(problem.frames(), problem.target_len());
    if path_count > cap {
        return Err(TdtError::PathCapExceeded {
            paths: path_count,
            cap,
        });
    }
    let (token_lp, _) = split_log_probs(problem, sigma)?;
    let mut walk = RnntWalk {
        token_lp: &token_lp,
        targets: problem.targets(),
        blank: problem.blank(),
        t_len: problem.frames(),
        record: path_count <= PATH_LIST_CAP,
        symbols: Vec::new(),
        durations: Vec::new(),
        scores: Vec::new(),
        paths: Vec::new(),
    };
    walk.visit(0, 0, 0.0);
    debug_assert_eq!(walk.scores.len() as u64, path_count);
    Ok(PathEnumeration {
        total_log_prob: pairwise_logsumexp(&walk.scores),
        path_count,
        paths: walk.record.then_some(walk.paths),
    })
}

struct TdtWalk<'a> {
    token_lp: &'a Array3<f64>,
    dur_lp: &'a Array3<f64>,
    targets: &'a [usize],
    durations: &'a DurationSet,
    blank: usize,
    t_len: usize,
    record: bool,
    symbols: Vec<usize>,
    emitted: Vec<usize>,
    scores: Vec<f64>,
    paths: Vec<PathRecord>,
}

impl TdtWalk<'_> {
    fn visit(&mut self, ti: usize, u: usize, score: f64) {
        if ti == self.t_len {
            // terminal column: a path is complete iff the target is complete
            if u == self.targets.len() {
                self.scores.push(score);
                if self.record {
                    self.paths.push(PathRecord {
                        symbols: self.symbols.clone(),
                        durations: self.emitted.clone(),
                        log_score: score,
                    });
                }
            }
            return;
        }
        for (di, d) in self.durations.iter().enumerate() {
            if ti + d > self.t_len {
                continue;
            }
            if d >= 1 {
                // blank with duration d (duration 0 disallowed for blank)
                self.symbols.push(self.blank);
                self.emitted.push(d);
                self.visit(
                    ti + d,
                    u,
                    score + self.token_lp[[ti, u, self.blank]] + self.dur_lp[[ti, u, di]],
                );
                self.symbols.pop();
                self.emitted.pop();
            }
            if u < self.targets.len() {
                let y = self.targets[u];
                self.symbols.push(y);
                self.emitted.push(d);
                self.visit(
                    ti + d,
                    u + 1,
                    score + self.token_lp[[ti, u, y]] + self.dur_lp[[ti, u, di]],
                );
                self.symbols.pop();
                self.emitted.pop();
            }
        }
    }
}

/// Exhaustively sum over every (symbol, duration) sequence that lands exactly
/// on the terminal node of the duration lattice.
pub fn enumerate_tdt(problem: &JointProblem, sigma: f64, cap: u64) -> Result<PathEnumeration> {
    let path_count = count_tdt_paths(problem.frames(), problem.target_len(), problem.durations());
    if path_count > cap {
        return Err(TdtError::PathCapExceeded {
            paths: path_count,
            cap,
        });
    }
    let (token_lp, dur_lp) = split_log_probs(problem, sigma)?;
    let mut walk = TdtWalk {
        token_lp: &token_lp,
        dur_lp: &dur_lp,
        targets: problem.targets(),
        durations: problem.durations(),
        blank: problem.blank(),
        t_len: problem.frames(),
        record: path_count <= PATH_LIST_CAP,
        symbols: Vec::new(),
        emitted: Vec::new(),
        scores: Vec::new(),
        paths: Vec::new(),
    };
    walk.visit(0, 0, 0.0);
    debug_assert_eq!(walk.scores.len() as u64, path_count);
    Ok(PathEnumeration {
        total_log_prob: pairwise_logsumexp(&walk.scores),
        path_count,
        paths: walk.record.then_some(walk.paths),
    })
}

/// Central finite differences of `loss_fn` over every entry of `at`.
///
/// `loss_fn` must be finite at `at` and at every perturbed point; a
/// non-finite evaluation is an error, not a NaN in the output.
pub fn finite_diff<F>(loss_fn: F, at: &Array3<f64>, h: f64) -> Result<Array3<f64>>
where
    F: Fn(&Array3<f64>) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(TdtError::InvalidArgument(format!(
            "step size must be finite and positive, got {h}"
        )));
    }
    if !loss_fn(at)?.is_finite() {
        return Err(TdtError::NonFiniteLoss { step: None });
    }
    let mut grad = Array3::zeros(at.dim());
    let mut x = at.clone();
    let (d0, d1, d2) = at.dim();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let orig = x[[i, j, k]];
                x[[i, j, k]] = orig + h;
                let up = loss_fn(&x)?;
                x[[i, j, k]] = orig - h;
                let down = loss_fn(&x)?;
                x[[i, j, k]] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(TdtError::NonFiniteLoss { step: None });
                }
                grad[[i, j, k]] = (up - down) / (2.0 * h);
            }
        }
    }
    Ok(grad)
}
