//! Greedy inference for both transducer flavors.
//!
//! The conventional decoder walks the frames one by one: blank advances `t`,
//! a non-blank token is appended and the same frame is evaluated again. The
//! duration-aware decoder takes independent argmaxes over the token block
//! and the duration block; the token is appended only when non-blank, and
//! `t` always advances by the predicted duration — which is what lets it
//! skip frames.
//!
//! Both loops carry a max-symbols-per-step guard: a run of emissions that
//! does not advance `t` (non-blank for the conventional decoder, duration 0
//! for the duration decoder) is cut after `max_symbols_per_step` by forcing
//! `t += 1`. Without the guard an adversarial joint can loop forever; with
//! it, any decode finishes within `max_symbols_per_step · T` joint
//! evaluations.

use crate::duration::DurationSet;
use crate::problem::JointProblem;
use serde::Serialize;
use std::collections::BTreeMap;

/// Anything that can produce a joint logit row for (frame, token context).
///
/// Implementations must be deterministic and return a vector of constant
/// length `V + 1 + N_d` (conventional-only joiners may return just `V + 1`;
/// the duration decoder requires the duration block).
pub trait Joiner {
    fn logits(&self, t: usize, context: &[usize]) -> Vec<f64>;
    /// Vocabulary size V, excluding blank; blank is slot V.
    fn vocab_size(&self) -> usize;
    fn num_durations(&self) -> usize;
}

/// Replays a stored joint tensor as a joiner: the decoder context is mapped
/// to the lattice row `u = min(#emitted, U)`, which lets decode tests reuse
/// lattice instances directly.
pub struct TabularJoiner<'a> {
    problem: &'a JointProblem,
}

impl<'a> TabularJoiner<'a> {
    pub fn new(problem: &'a JointProblem) -> Self {
        Self { problem }
    }
}

impl Joiner for TabularJoiner<'_> {
    fn logits(&self, t: usize, context: &[usize]) -> Vec<f64> {
        let u = context.len().min(self.problem.target_len());
        let logits = self.problem.logits();
        (0..logits.dim().2).map(|k| logits[[t, u, k]]).collect()
    }

    fn vocab_size(&self) -> usize {
        self.problem.vocab()
    }

    fn num_durations(&self) -> usize {
        self.problem.durations().len()
    }
}

/// Decode-loop limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodePolicy {
    /// Maximum emissions without a time advance at one frame before the
    /// decoder forces `t += 1`. `None` disables the guard (the loop may then
    /// spin forever on adversarial joints).
    pub max_symbols_per_step: Option<usize>,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            max_symbols_per_step: Some(10),
        }
    }
}

/// One emission: the frame it happened at, the argmax symbol, and the frames
/// it consumed (for the conventional decoder: 1 for blank, 0 for tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmissionEvent {
    pub frame: usize,
    pub symbol: usize,
    pub duration: usize,
}

/// Outcome of one greedy decode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecodeResult {
    /// Non-blank tokens in emission order.
    pub hypothesis: Vec<usize>,
    /// Number of joint evaluations.
    pub steps: usize,
    /// Duration consumed by each emission, in emission order.
    pub emitted_durations: Vec<usize>,
    pub blank_count: usize,
    pub nonblank_count: usize,
    /// Times the max-symbols guard forced a time advance.
    pub guard_trips: usize,
    /// Full emission trace.
    pub events: Vec<EmissionEvent>,
}

impl DecodeResult {
    fn push(&mut self, frame: usize, symbol: usize, duration: usize, blank: usize) {
        if symbol == blank {
            self.blank_count += 1;
        } else {
            self.hypothesis.push(symbol);
            self.nonblank_count += 1;
        }
        self.steps += 1;
        self.emitted_durations.push(duration);
        self.events.push(EmissionEvent {
            frame,
            symbol,
            duration,
        });
    }

    fn new() -> Self {
        Self {
            hypothesis: Vec::new(),
            steps: 0,
            emitted_durations: Vec::new(),
            blank_count: 0,
            nonblank_count: 0,
            guard_trips: 0,
            events: Vec::new(),
        }
    }

    /// Frame of the first non-blank emission, if any.
    pub fn first_token_frame(&self, blank: usize) -> Option<usize> {
        self.events.iter().find(|e| e.symbol != blank).map(|e| e.frame)
    }

    /// Mean consumed duration per emission; 0 for an empty decode.
    pub fn mean_duration(&self) -> f64 {
        if self.emitted_durations.is_empty() {
            0.0
        } else {
            self.emitted_durations.iter().sum::<usize>() as f64
                / self.emitted_durations.len() as f64
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    // ties break toward the lowest index
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a conventional transducer over `t_len` frames.
///
/// Argmax over the `V+1` token slots only; blank advances time, a token is
/// appended and the same frame is evaluated again. Blank emissions are
/// recorded with duration 1 and tokens with duration 0.
pub fn greedy_rnnt(joiner: &dyn Joiner, t_len: usize, policy: &DecodePolicy) -> DecodeResult {
    let blank = joiner.vocab_size();
    let token_slots = blank + 1;
    let mut result = DecodeResult::new();
    let mut t = 0;
    let mut at_frame = 0usize;
    while t < t_len {
        let logits = joiner.logits(t, &result.hypothesis);
        let idx = argmax(&logits[..token_slots]);
        if idx != blank {
            result.push(t, idx, 0, blank);
            at_frame += 1;
            if policy
                .max_symbols_per_step
                .is_some_and(|cap| at_frame >= cap)
            {
                result.guard_trips += 1;
                t += 1;
                at_frame = 0;
            }
        } else {
            result.push(t, blank, 1, blank);
            t += 1;
            at_frame = 0;
        }
    }
    result
}

/// Greedy decoding of a duration transducer over `t_len` frames.
///
/// Token and duration argmaxes are taken over their disjoint logit blocks;
/// the token is appended only when non-blank, and `t` advances by the argmax
/// duration either way. A blank with duration 0 is emitted literally (and
/// counts toward the guard like any other zero-advance emission).
pub fn greedy_tdt(
    joiner: &dyn Joiner,
    t_len: usize,
    durations: &DurationSet,
    policy: &DecodePolicy,
) -> DecodeResult {
    let blank = joiner.vocab_size();
    let token_slots = blank + 1;
    debug_assert_eq!(joiner.num_durations(), durations.len());
    let mut result = DecodeResult::new();
    let mut t = 0;
    let mut zero_at_frame = 0usize;
    while t < t_len {
        let logits = joiner.logits(t, &result.hypothesis);
        let idx = argmax(&logits[..token_slots]);
        let di = argmax(&logits[token_slots..token_slots + durations.len()]);
        let d = durations.get(di);
        result.push(t, idx, d, blank);
        if d == 0 {
            zero_at_frame += 1;
            if policy
                .max_symbols_per_step
                .is_some_and(|cap| zero_at_frame >= cap)
            {
                result.guard_trips += 1;
                t += 1;
                zero_at_frame = 0;
            }
        } else {
            t += d;
            zero_at_frame = 0;
        }
    }
    result
}

/// Result of a batched decode: per-utterance results plus the per-step
/// advances the whole batch took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDecodeResult {
    pub results: Vec<DecodeResult>,
    /// Time advance applied to the batch at each synchronized step.
    pub advances: Vec<usize>,
}

/// Batched greedy duration decoding with the min-duration policy.
///
/// All utterances share one time index. Each step, every still-active
/// utterance (those with `t < t_len[i]`) evaluates its joint at `t` and
/// emits per the single-utterance rules; the batch then advances by the
/// minimum duration predicted among active utterances. Finished utterances
/// drop out of the minimum, so a short utterance cannot pin the batch. The
/// guard applies to the batch advance: `max_symbols_per_step` consecutive
/// zero advances force `t += 1`.
///
/// A batch of one is step-for-step identical to [`greedy_tdt`].
pub fn batched_greedy_tdt(
    joiners: &[&dyn Joiner],
    t_lens: &[usize],
    durations: &DurationSet,
    policy: &DecodePolicy,
) -> BatchDecodeResult {
    assert_eq!(joiners.len(), t_lens.len(), "one length per joiner");
    let blank = joiners.first().map_or(0, |j| j.vocab_size());
    let token_slots = blank + 1;
    let mut results: Vec<DecodeResult> = (0..joiners.len()).map(|_| DecodeResult::new()).collect();
    let mut advances = Vec::new();
    let mut t = 0usize;
    let mut zero_at_frame = 0usize;
    loop {
        let active: Vec<usize> = (0..joiners.len()).filter(|&i| t < t_lens[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut min_d = usize::MAX;
        for &i in &active {
            let logits = joiners[i].logits(t, &results[i].hypothesis);
            let idx = argmax(&logits[..token_slots]);
            let di = argmax(&logits[token_slots..token_slots + durations.len()]);
            let d = durations.get(di);
            results[i].push(t, idx, d, blank);
            min_d = min_d.min(d);
        }
        if min_d == 0 {
            zero_at_frame += 1;
            if policy
                .max_symbols_per_step
                .is_some_and(|cap| zero_at_frame >= cap)
            {
                for &i in &active {
                    results[i].guard_trips += 1;
                }
                min_d = 1;
                zero_at_frame = 0;
            }
        } else {
            zero_at_frame = 0;
        }
        advances.push(min_d);
        t += min_d;
    }
    BatchDecodeResult { results, advances }
}

/// Histogram of emitted durations plus blank/non-blank totals across a set
/// of decode results. Conventional results already carry the durations-1/0
/// convention for blanks/tokens, so both decoders aggregate uniformly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmissionStats {
    pub duration_counts: BTreeMap<usize, u64>,
    pub blanks: u64,
    pub nonblanks: u64,
}

pub fn emission_stats(results: &[DecodeResult]) -> EmissionStats {
    let mut duration_counts = BTreeMap::new();
    let mut blanks = 0;
    let mut nonblanks = 0;
    for r in results {
        for &d in &r.emitted_durations {
            *duration_counts.entry(d).or_insert(0) += 1;
        }
        blanks += r.blank_count as u64;
        nonblanks += r.nonblank_count as u64;
    }
    EmissionStats {
        duration_counts,
        blanks,
        nonblanks,
    }
}

/// JSON-lines view of a decode result: hypothesis, step count, and the
/// duration histogram.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeSummary {
    pub hypothesis: Vec<usize>,
    pub steps: usize,
    pub durations_histogram: BTreeMap<usize, u64>,
}

impl DecodeSummary {
    pub fn of(result: &DecodeResult) -> Self {
        let stats = emission_stats(std::slice::from_ref(result));
        Self {
            hypothesis: result.hypothesis.clone(),
            steps: result.steps,
            durations_histogram: stats.duration_counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Joiner that always produces the same peaked row.
    struct ConstJoiner {
        vocab: usize,
        durations: usize,
        token: usize,
        duration_idx: usize,
    }

    impl Joiner for ConstJoiner {
        fn logits(&self, _t: usize, _context: &[usize]) -> Vec<f64> {
            let mut row = vec![0.0; self.vocab + 1 + self.durations];
            row[self.token] = 5.0;
            row[self.vocab + 1 + self.duration_idx] = 5.0;
            row
        }
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn num_durations(&self) -> usize {
            self.durations
        }
    }

    /// Emits the u-th target token once `t` reaches `u * stride`, blank
    /// otherwise; always predicts the largest positive duration.
    struct ScheduledJoiner {
        vocab: usize,
        durations: DurationSet,
        targets: Vec<usize>,
        stride: usize,
    }

    impl Joiner for ScheduledJoiner {
        fn logits(&self, t: usize, context: &[usize]) -> Vec<f64> {
            let mut row = vec![0.0; self.vocab + 1 + self.durations.len()];
            let u = context.len();
            let symbol = if u < self.targets.len() && t >= u * self.stride {
                self.targets[u]
            } else {
                self.vocab // blank
            };
            row[symbol] = 5.0;
            let best = (0..self.durations.len())
                .rev()
                .find(|&i| self.durations.get(i) >= 1)
                .unwrap();
            row[self.vocab + 1 + best] = 5.0;
            row
        }
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn num_durations(&self) -> usize {
            self.durations.len()
        }
    }

    #[test]
    fn rnnt_all_blank() {
        let j = ConstJoiner {
            vocab: 3,
            durations: 2,
            token: 3,
            duration_idx: 0,
        };
        let r = greedy_rnnt(&j, 6, &DecodePolicy::default());
        assert!(r.hypothesis.is_empty());
        assert_eq!(r.steps, 6);
        assert_eq!(r.blank_count, 6);
        assert_eq!(r.emitted_durations, vec![1; 6]);
    }

    #[test]
    fn rnnt_peaked_single_token() {
        // token at t=0, blanks afterwards: hyp=[y], steps=T+1
        let t_len = 5;
        let j = ScheduledJoiner {
            vocab: 3,
            durations: DurationSet::new(vec![1]).unwrap(),
            targets: vec![2],
            stride: 0,
        };
        let r = greedy_rnnt(&j, t_len, &DecodePolicy::default());
        assert_eq!(r.hypothesis, vec![2]);
        assert_eq!(r.steps, t_len + 1);
        assert_eq!(r.blank_count, t_len);
    }

    #[test]
    fn rnnt_guard_caps_tokens_per_frame() {
        let j = ConstJoiner {
            vocab: 2,
            durations: 1,
            token: 0,
            duration_idx: 0,
        };
        let policy = DecodePolicy {
            max_symbols_per_step: Some(10),
        };
        let r = greedy_rnnt(&j, 6, &policy);
        assert_eq!(r.nonblank_count, 60); // exactly 10 tokens per frame
        assert_eq!(r.blank_count, 0);
        assert_eq!(r.guard_trips, 6);
        assert_eq!(r.steps, 60);
        assert!(r.steps <= 10 * 6);
    }

    #[test]
    fn tdt_blank_skips_by_duration() {
        // always (blank, d=2) over T=6: ceil(6/2) = 3 evaluations
        let j = ConstJoiner {
            vocab: 3,
            durations: 3,
            token: 3,
            duration_idx: 2,
        };
        let d = DurationSet::new(vec![0, 1, 2]).unwrap();
        let r = greedy_tdt(&j, 6, &d, &DecodePolicy::default());
        assert!(r.hypothesis.is_empty());
        assert_eq!(r.steps, 3);
        assert_eq!(r.emitted_durations, vec![2, 2, 2]);
        assert_eq!(r.mean_duration(), 2.0);
    }

    #[test]
    fn tdt_token_and_skip_in_one_step() {
        // a single evaluation appends the token AND advances t by 2
        let j = ConstJoiner {
            vocab: 3,
            durations: 3,
            token: 1,
            duration_idx: 2,
        };
        let d = DurationSet::new(vec![0, 1, 2]).unwrap();
        let r = greedy_tdt(&j, 2, &d, &DecodePolicy::default());
        assert_eq!(r.hypothesis, vec![1]);
        assert_eq!(r.steps, 1);
        assert_eq!(r.events[0].duration, 2);
    }

    #[test]
    fn tdt_guard_terminates_adversarial_joint() {
        // always (token, d=0): without the guard this would never advance
        let j = ConstJoiner {
            vocab: 2,
            durations: 2,
            token: 0,
            duration_idx: 0, // duration 0
        };
        let d = DurationSet::new(vec![0, 1]).unwrap();
        let policy = DecodePolicy {
            max_symbols_per_step: Some(10),
        };
        let r = greedy_tdt(&j, 4, &d, &policy);
        assert_eq!(r.steps, 40); // 10 zero-advance emissions per frame
        assert!(r.steps <= 10 * 4);
        assert_eq!(r.guard_trips, 4);
    }

    #[test]
    fn tdt_blank_with_duration_zero_is_literal() {
        // blank + d=0 emits the blank, does not advance, and trips the guard
        let j = ConstJoiner {
            vocab: 2,
            durations: 2,
            token: 2, // blank
            duration_idx: 0,
        };
        let d = DurationSet::new(vec![0, 3]).unwrap();
        let policy = DecodePolicy {
            max_symbols_per_step: Some(4),
        };
        let r = greedy_tdt(&j, 3, &d, &policy);
        assert!(r.hypothesis.is_empty());
        assert_eq!(r.blank_count, 12); // 4 per frame, 3 forced advances
        assert_eq!(r.guard_trips, 3);
    }

    #[test]
    fn batch_advances_by_minimum_duration() {
        let durations = DurationSet::new(vec![0, 1, 2, 3, 4, 5, 6]).unwrap();
        let joiners: Vec<ConstJoiner> = [3, 4, 3, 6]
            .iter()
            .map(|&d| ConstJoiner {
                vocab: 2,
                durations: 7,
                token: 2,
                duration_idx: d, // durations are 0..=6, so index == duration
            })
            .collect();
        let refs: Vec<&dyn Joiner> = joiners.iter().map(|j| j as &dyn Joiner).collect();
        let r = batched_greedy_tdt(&refs, &[12, 12, 12, 12], &durations, &DecodePolicy::default());
        assert_eq!(r.advances[0], 3);
        assert!(r.advances.iter().all(|&a| a == 3));
        // every utterance was evaluated at t = 0, 3, 6, 9
        for res in &r.results {
            let frames: Vec<usize> = res.events.iter().map(|e| e.frame).collect();
            assert_eq!(frames, vec![0, 3, 6, 9]);
        }
    }

    #[test]
    fn batch_of_one_is_bit_identical_to_single() {
        let d = DurationSet::new(vec![0, 1, 2]).unwrap();
        let j = ScheduledJoiner {
            vocab: 3,
            durations: d.clone(),
            targets: vec![0, 2, 1],
            stride: 2,
        };
        let single = greedy_tdt(&j, 9, &d, &DecodePolicy::default());
        let batch = batched_greedy_tdt(&[&j], &[9], &d, &DecodePolicy::default());
        assert_eq!(batch.results[0], single);
    }

    #[test]
    fn identical_joiners_decode_identically_in_batch() {
        let d = DurationSet::new(vec![0, 1, 2]).unwrap();
        let j1 = ScheduledJoiner {
            vocab: 3,
            durations: d.clone(),
            targets: vec![1, 1],
            stride: 3,
        };
        let j2 = ScheduledJoiner {
            vocab: 3,
            durations: d.clone(),
            targets: vec![1, 1],
            stride: 3,
        };
        let single = greedy_tdt(&j1, 8, &d, &DecodePolicy::default());
        let batch = batched_greedy_tdt(&[&j1, &j2], &[8, 8], &d, &DecodePolicy::default());
        assert_eq!(batch.results[0], single);
        assert_eq!(batch.results[1], single);
    }

    #[test]
    fn finished_utterances_drop_out_of_the_minimum() {
        let durations = DurationSet::new(vec![1, 2]).unwrap();
        // utterance 0 predicts d=1 but is only 2 frames long;
        // utterance 1 predicts d=2 over 8 frames.
        let j0 = ConstJoiner {
            vocab: 2,
            durations: 2,
            token: 2,
            duration_idx: 0,
        };
        let j1 = ConstJoiner {
            vocab: 2,
            durations: 2,
            token: 2,
            duration_idx: 1,
        };
        let r = batched_greedy_tdt(
            &[&j0, &j1],
            &[2, 8],
            &durations,
            &DecodePolicy::default(),
        );
        // while both are active the batch advances by 1; after t=2 only
        // utterance 1 remains and the batch advances by 2
        assert_eq!(r.advances, vec![1, 1, 2, 2, 2]);
        assert_eq!(r.results[0].steps, 2);
        assert_eq!(r.results[1].steps, 5);
    }

    #[test]
    fn nonblank_count_invariant_across_duration_sets() {
        // peaked joints encoding the same 3-token target: the emitted token
        // sequence does not depend on which durations are available
        let targets = vec![0, 2, 1];
        for durs in [vec![1], vec![0, 1], vec![0, 1, 2], vec![0, 1, 2, 3, 4]] {
            let d = DurationSet::new(durs).unwrap();
            let j = ScheduledJoiner {
                vocab: 3,
                durations: d.clone(),
                targets: targets.clone(),
                stride: 3,
            };
            let r = greedy_tdt(&j, 12, &d, &DecodePolicy::default());
            assert_eq!(r.hypothesis, targets, "durations {d}");
            assert_eq!(r.nonblank_count, 3);
        }
    }

    #[test]
    fn stats_aggregate_durations_and_counts() {
        let j = ConstJoiner {
            vocab: 3,
            durations: 3,
            token: 3,
            duration_idx: 2,
        };
        let d = DurationSet::new(vec![0, 1, 2]).unwrap();
        let r = greedy_tdt(&j, 6, &d, &DecodePolicy::default());
        let stats = emission_stats(std::slice::from_ref(&r));
        assert_eq!(stats.duration_counts.get(&2), Some(&3));
        assert_eq!(stats.blanks, 3);
        assert_eq!(stats.nonblanks, 0);
    }

    #[test]
    fn rnnt_stats_use_duration_convention() {
        // T=6, two scheduled tokens: blanks count 6 with duration 1,
        // tokens count 2 with duration 0
        let j = ScheduledJoiner {
            vocab: 3,
            durations: DurationSet::new(vec![1]).unwrap(),
            targets: vec![0, 1],
            stride: 2,
        };
        let r = greedy_rnnt(&j, 6, &DecodePolicy::default());
        assert_eq!(r.blank_count, 6);
        assert_eq!(r.nonblank_count, 2);
        let stats = emission_stats(std::slice::from_ref(&r));
        assert_eq!(stats.duration_counts.get(&1), Some(&6));
        assert_eq!(stats.duration_counts.get(&0), Some(&2));
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn decode_summary_serializes() {
        let j = ConstJoiner {
            vocab: 2,
            durations: 2,
            token: 0,
            duration_idx: 1,
        };
        let d = DurationSet::new(vec![0, 2]).unwrap();
        let r = greedy_tdt(&j, 4, &d, &DecodePolicy::default());
        let json = serde_json::to_string(&DecodeSummary::of(&r)).unwrap();
        assert!(json.contains("\"hypothesis\":[0,0]"));
        assert!(json.contains("\"durations_histogram\":{\"2\":2}"));
    }
}
