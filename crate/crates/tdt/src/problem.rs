//! A complete lattice instance: joint logits, targets, and dimensions.

use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use ndarray::Array3;

/// One training/evaluation instance.
///
/// `logits` has shape `T × (U+1) × (V+1+N_d)`, raw (pre-softmax), with the
/// last axis split into a token block of `V+1` entries followed by a duration
/// block of `N_d` entries. Token indices `0..V` are real tokens; index `V` is
/// blank. Storage is 0-based; the math convention indexes frames `t ∈ [1, T]`
/// and emitted-token counts `u ∈ [0, U]`, so `logits[[t-1, u, k]]` holds the
/// logits at lattice state `(t, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointProblem {
    logits: Array3<f64>,
    targets: Vec<usize>,
    vocab: usize,
    durations: DurationSet,
}

impl JointProblem {
    pub fn new(
        logits: Array3<f64>,
        targets: Vec<usize>,
        vocab: usize,
        durations: DurationSet,
    ) -> Result<Self> {
        let (t_len, u_rows, k_len) = logits.dim();
        if t_len == 0 {
            return Err(TdtError::EmptyInput);
        }
        if vocab == 0 {
            return Err(TdtError::InvalidArgument(
                "vocabulary must contain at least one real token".into(),
            ));
        }
        let expected = vec![t_len, targets.len() + 1, vocab + 1 + durations.len()];
        if u_rows != targets.len() + 1 || k_len != vocab + 1 + durations.len() {
            return Err(TdtError::ShapeMismatch {
                what: "joint logits",
                expected,
                actual: vec![t_len, u_rows, k_len],
            });
        }
        for (index, &value) in targets.iter().enumerate() {
            if value >= vocab {
                return Err(TdtError::InvalidTarget {
                    index,
                    value,
                    vocab,
                });
            }
        }
        Ok(Self {
            logits,
            targets,
            vocab,
            durations,
        })
    }

    /// Input length T.
    pub fn frames(&self) -> usize {
        self.logits.dim().0
    }

    /// Target length U.
    pub fn target_len(&self) -> usize {
        self.targets.len()
    }

    /// Vocabulary size V, excluding blank.
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Index of the blank symbol (always the last token slot).
    pub fn blank(&self) -> usize {
        self.vocab
    }

    /// Width of the token logit block, V+1.
    pub fn token_slots(&self) -> usize {
        self.vocab + 1
    }

    pub fn durations(&self) -> &DurationSet {
        &self.durations
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn logits(&self) -> &Array3<f64> {
        &self.logits
    }

    /// Mutable access to the raw logits; the optimization harness updates
    /// them in place.
    pub fn logits_mut(&mut self) -> &mut Array3<f64> {
        &mut self.logits
    }
}
