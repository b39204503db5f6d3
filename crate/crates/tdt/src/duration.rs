//! The set of frame advances a model may emit.

use crate::error::{Result, TdtError};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Ordered set of supported durations (frame counts per emission).
///
/// Invariants, enforced at construction:
/// - strictly increasing, so index ↔ duration is a bijection;
/// - at least one duration ≥ 1 (otherwise no path can ever advance in time);
/// - if 0 is present it is the first element (implied by the ordering).
///
/// The duration at index `i` corresponds to the `i`-th entry of the duration
/// block of the joint logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DurationSet {
    durations: Vec<usize>,
}

impl DurationSet {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() {
            return Err(TdtError::InvalidDurations("empty set".into()));
        }
        if !durations.windows(2).all(|w| w[0] < w[1]) {
            return Err(TdtError::InvalidDurations(format!(
                "not strictly increasing: {durations:?}"
            )));
        }
        if *durations.last().unwrap() < 1 {
            return Err(TdtError::InvalidDurations(
                "must contain a duration >= 1".into(),
            ));
        }
        Ok(Self { durations })
    }

    /// Contiguous range `lo..=hi`, e.g. `contiguous(0, 8)` for a "0-8" config.
    pub fn contiguous(lo: usize, hi: usize) -> Result<Self> {
        Self::new((lo..=hi).collect())
    }

    /// Parse the shorthand used for duration configs: a range `"0-8"`,
    /// a single value `"1"`, or an explicit comma list `"0,2,3"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parse_one = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| TdtError::InvalidDurations(format!("cannot parse {s:?}")))
        };
        if let Some((lo, hi)) = spec.split_once('-') {
            return Self::contiguous(parse_one(lo)?, parse_one(hi)?);
        }
        let values = spec.split(',').map(parse_one).collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.durations
    }

    /// Number of durations, i.e. the width of the duration logit block.
    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    /// Duration value at block index `i`.
    pub fn get(&self, i: usize) -> usize {
        self.durations[i]
    }

    pub fn max(&self) -> usize {
        *self.durations.last().unwrap()
    }

    pub fn has_zero(&self) -> bool {
        self.durations[0] == 0
    }

    pub fn index_of(&self, duration: usize) -> Option<usize> {
        self.durations.binary_search(&duration).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.durations.iter().copied()
    }
}

impl TryFrom<Vec<usize>> for DurationSet {
    type Error = TdtError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DurationSet> for Vec<usize> {
    fn from(d: DurationSet) -> Vec<usize> {
        d.durations
    }
}

impl fmt::Display for DurationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let contiguous = self
            .durations
            .windows(2)
            .all(|w| w[1] == w[0] + 1);
        if contiguous && self.durations.len() > 1 {
            write!(f, "{}-{}", self.durations[0], self.max())
        } else {
            let parts: Vec<String> = self.durations.iter().map(|d| d.to_string()).collect();
            write!(f, "{}", parts.join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_range_shorthand() {
        let d = DurationSet::parse("0-4").unwrap();
        assert_eq!(d.as_slice(), &[0, 1, 2, 3, 4]);
        assert_eq!(d.to_string(), "0-4");
    }

    #[test]
    fn parses_comma_list_and_single() {
        assert_eq!(DurationSet::parse("0,2,3").unwrap().as_slice(), &[0, 2, 3]);
        assert_eq!(DurationSet::parse("1").unwrap().as_slice(), &[1]);
        assert_eq!(DurationSet::parse("0,2").unwrap().to_string(), "0,2");
    }

    #[test]
    fn rejects_invalid_sets() {
        assert!(DurationSet::new(vec![]).is_err());
        assert!(DurationSet::new(vec![0]).is_err()); // cannot advance t
        assert!(DurationSet::new(vec![1, 1]).is_err());
        assert!(DurationSet::new(vec![2, 1]).is_err());
        assert!(DurationSet::parse("x-3").is_err());
    }

    #[test]
    fn index_mapping_is_bijective() {
        let d = DurationSet::new(vec![0, 2, 5]).unwrap();
        for (i, dur) in d.iter().enumerate() {
            assert_eq!(d.index_of(dur), Some(i));
            assert_eq!(d.get(i), dur);
        }
        assert_eq!(d.index_of(1), None);
        assert!(d.has_zero());
        assert_eq!(d.max(), 5);
    }
}
