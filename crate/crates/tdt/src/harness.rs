//! Synthetic force-alignment experiments.
//!
//! A joint tensor is sampled i.i.d. from N(0,1) together with a uniform
//! random target, then optimized *directly* (the tensor entries are the
//! parameters, there is no network) against the duration-lattice loss with
//! Adam. After enough steps the loss concentrates the probability mass on
//! one alignment path, so the greedy decode of the optimized joint recovers
//! the target exactly, and the alignment posterior shows where each token
//! landed. Sweeps over the duration set, FastEmit strength, and input
//! length expose how those knobs move the alignment.
//!
//! Reproducibility: the only entropy source is a ChaCha8 generator seeded
//! from the config's `seed`. Normal variates come from a Box–Muller
//! transform (implemented here so the mapping from raw uniforms is pinned),
//! consumed in row-major logit order, then `U` uniform target draws, then
//! one Bernoulli draw per optimization step for the sampled loss. Identical
//! configs therefore produce bit-identical results.

use crate::decode::{
    emission_stats, greedy_tdt, DecodePolicy, DecodeResult, EmissionStats, TabularJoiner,
};
use crate::duration::DurationSet;
use crate::error::{Result, TdtError};
use crate::grad::{sampled_loss_grad, GradOptions};
use crate::io::SweepRow;
use crate::lattice::{alignment_posterior, split_log_probs, tdt_loss, tdt_tables, AlignmentPosterior};
use crate::problem::JointProblem;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dimensions, loss knobs, optimizer settings, and the seed for one run.
///
/// The default is the standard synthetic setup: T=70, U=10, V=5, eight
/// durations {0..7}, σ=0.05, λ=ω=0, learning rate 0.1, 100 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub t_len: usize,
    pub u_len: usize,
    pub vocab: usize,
    pub durations: DurationSet,
    pub sigma: f64,
    pub fastemit_lambda: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            t_len: 70,
            u_len: 10,
            vocab: 5,
            durations: DurationSet::contiguous(0, 7).expect("valid"),
            sigma: 0.05,
            fastemit_lambda: 0.0,
            omega: 0.0,
            learning_rate: 0.1,
            steps: 100,
            seed: 0x7D7,
        }
    }
}

impl ExperimentConfig {
    pub fn n_durations(&self) -> usize {
        self.durations.len()
    }

    fn grad_options(&self) -> GradOptions {
        GradOptions {
            sigma: self.sigma,
            fastemit_lambda: self.fastemit_lambda,
            omega: self.omega,
            rng_seed: self.seed,
        }
    }

    /// Short human-readable tag used in sweep tables.
    pub fn label(&self) -> String {
        format!(
            "T{}_U{}_D{}_lam{}_om{}",
            self.t_len, self.u_len, self.durations, self.fastemit_lambda, self.omega
        )
    }
}

/// Box–Muller normal sampler over a caller-owned uniform generator.
///
/// Draws pairs (u1, u2), u1 shifted away from zero so `ln` stays finite,
/// and hands out both `r·cos` and `r·sin` before drawing again.
pub struct NormalSampler {
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new() -> Self {
        Self { spare: None }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl Default for NormalSampler {
    fn default() -> Self {
        Self::new()
    }
}

/// Sample a fresh problem: logits ~ N(0,1) in row-major order, then targets
/// uniform over `[0, V)`. Same seed, same config ⇒ bit-identical problem.
pub fn sample_problem<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<JointProblem> {
    let k = config.vocab + 1 + config.durations.len();
    let mut normals = NormalSampler::new();
    let mut logits = Array3::zeros((config.t_len, config.u_len + 1, k));
    for x in logits.iter_mut() {
        *x = normals.sample(rng);
    }
    let targets = (0..config.u_len)
        .map(|_| rng.gen_range(0..config.vocab))
        .collect();
    JointProblem::new(logits, targets, config.vocab, config.durations.clone())
}

/// Adam state for one tensor of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Array3<f64>,
    pub second_moment: Array3<f64>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: (usize, usize, usize)) -> Self {
        Self {
            first_moment: Array3::zeros(dim),
            second_moment: Array3::zeros(dim),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction, applied to `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Array3<f64>,
    grads: &Array3<f64>,
    learning_rate: f64,
) -> Result<()> {
    if params.dim() != grads.dim() || params.dim() != state.first_moment.dim() {
        return Err(TdtError::ShapeMismatch {
            what: "adam update",
            expected: vec![params.dim().0, params.dim().1, params.dim().2],
            actual: vec![grads.dim().0, grads.dim().1, grads.dim().2],
        });
    }
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bias1 = 1.0 - b1.powi(state.step as i32);
    let bias2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// The optimized joint (same targets the run trained against).
    pub problem: JointProblem,
    /// Loss before training plus after every step: `steps + 1` entries.
    pub loss_trajectory: Vec<f64>,
    pub posterior: AlignmentPosterior,
    pub decode: DecodeResult,
    pub stats: EmissionStats,
}

impl ExperimentResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trajectory[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trajectory.last().unwrap()
    }

    /// Did the greedy decode of the optimized joint recover the target?
    pub fn force_aligned(&self) -> bool {
        self.decode.hypothesis == self.problem.targets()
    }

    pub fn sweep_row(&self) -> SweepRow {
        SweepRow {
            label: self.config.label(),
            first_token_frame: self.decode.first_token_frame(self.problem.blank()),
            mean_duration: self.decode.mean_duration(),
            final_loss: self.final_loss(),
        }
    }

    /// Write the run artifacts into `dir`: `config.json`, `loss.csv`,
    /// `alignment.csv`, `alignment.pgm`, `decode.json`, `durations.csv`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        use crate::io;
        std::fs::create_dir_all(dir)?;
        let metadata = RunMetadata {
            config: &self.config,
            n_durations: self.config.n_durations(),
            targets: self.problem.targets().to_vec(),
            adam: AdamMetadata::default(),
            initial_loss: self.initial_loss(),
            final_loss: self.final_loss(),
            force_aligned: self.force_aligned(),
        };
        let file = std::fs::File::create(dir.join("config.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &metadata)?;
        io::write_loss_csv(&dir.join("loss.csv"), &self.loss_trajectory)?;
        io::write_posterior(&self.posterior, dir)?;
        io::write_decode_json(&dir.join("decode.json"), &self.decode)?;
        io::write_durations_csv(&dir.join("durations.csv"), &self.stats)?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct AdamMetadata {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Default for AdamMetadata {
    fn default() -> Self {
        let s = AdamState::new((1, 1, 1));
        Self {
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    config: &'a ExperimentConfig,
    n_durations: usize,
    targets: Vec<usize>,
    adam: AdamMetadata,
    initial_loss: f64,
    final_loss: f64,
    force_aligned: bool,
}

/// Loss is declared divergent after this many consecutive steps above
/// 10× the initial loss (a non-finite loss aborts immediately).
const DIVERGENCE_PATIENCE: usize = 5;

/// Run one experiment: sample, optimize, decode, summarize.
///
/// Per step the gradient comes from the sampled loss (duration-lattice loss
/// with probability `1−ω`, conventional loss on the token block otherwise),
/// with FastEmit scaling folded in when `λ > 0`. The recorded trajectory is
/// always the duration-lattice loss at the configured σ, evaluated before
/// training and after every update.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut problem = sample_problem(config, &mut rng)?;
    let options = config.grad_options();
    options.validate()?;

    let initial = tdt_loss(&problem, config.sigma)?;
    if !initial.is_finite() {
        return Err(TdtError::Divergence {
            step: 0,
            loss: initial,
        });
    }
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    trajectory.push(initial);

    let mut adam = AdamState::new(problem.logits().dim());
    let mut grads = Array3::zeros(problem.logits().dim());
    let mut high_loss_streak = 0usize;
    for step in 0..config.steps {
        let (_, bundle, _) = sampled_loss_grad(&problem, &options, &mut rng)?;
        let v_slots = problem.token_slots();
        for ((i, j, k), g) in bundle.token_logit_grad.indexed_iter() {
            grads[[i, j, k]] = *g;
        }
        for ((i, j, k), g) in bundle.duration_logit_grad.indexed_iter() {
            grads[[i, j, v_slots + k]] = *g;
        }
        adam_step(&mut adam, problem.logits_mut(), &grads, config.learning_rate)?;

        let loss = tdt_loss(&problem, config.sigma)?;
        trajectory.push(loss);
        if !loss.is_finite() {
            return Err(TdtError::Divergence { step, loss });
        }
        if loss > 10.0 * initial {
            high_loss_streak += 1;
            if high_loss_streak >= DIVERGENCE_PATIENCE {
                return Err(TdtError::Divergence { step, loss });
            }
        } else {
            high_loss_streak = 0;
        }
    }

    let (token_lp, dur_lp) = split_log_probs(&problem, config.sigma)?;
    let tables = tdt_tables(&token_lp, &dur_lp, problem.targets(), problem.durations())?;
    let posterior = alignment_posterior(&tables);
    let decode = greedy_tdt(
        &TabularJoiner::new(&problem),
        config.t_len,
        problem.durations(),
        &DecodePolicy::default(),
    );
    let stats = emission_stats(std::slice::from_ref(&decode));
    Ok(ExperimentResult {
        config: config.clone(),
        problem,
        loss_trajectory: trajectory,
        posterior,
        decode,
        stats,
    })
}

/// Run several configs (in parallel) and return their results in order.
///
/// Sweep rows are comparable when the configs share U, V, and the seed;
/// sweeping T re-samples the joint by necessity, everything else reuses the
/// identical sampled problem.
pub fn sweep(configs: &[ExperimentConfig]) -> Result<Vec<ExperimentResult>> {
    if configs.is_empty() {
        return Err(TdtError::InvalidArgument("empty sweep".into()));
    }
    let first = &configs[0];
    for c in configs {
        if c.u_len != first.u_len || c.vocab != first.vocab || c.seed != first.seed {
            return Err(TdtError::InvalidArgument(
                "sweep configs must share U, V, and seed".into(),
            ));
        }
    }
    configs.par_iter().map(run_experiment).collect()
}

/// Comparison table for a finished sweep.
pub fn sweep_rows(results: &[ExperimentResult]) -> Vec<SweepRow> {
    results.iter().map(ExperimentResult::sweep_row).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            t_len: 10,
            u_len: 2,
            vocab: 3,
            durations: DurationSet::contiguous(0, 3).unwrap(),
            sigma: 0.05,
            steps: 40,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let config = ExperimentConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(config.seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(config.seed);
        let p1 = sample_problem(&config, &mut r1).unwrap();
        let p2 = sample_problem(&config, &mut r2).unwrap();
        assert_eq!(p1.targets(), p2.targets());
        for (a, b) in p1.logits().iter().zip(p2.logits().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn default_config_has_documented_shape() {
        let config = ExperimentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let p = sample_problem(&config, &mut rng).unwrap();
        assert_eq!(p.logits().dim(), (70, 11, 14)); // (V+1)=6 tokens + 8 durations
        assert!(p.targets().iter().all(|&y| y < 5));
    }

    #[test]
    fn sampled_logits_are_standard_normal() {
        let config = ExperimentConfig {
            t_len: 100,
            u_len: 99,
            vocab: 9,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = sample_problem(&config, &mut rng).unwrap();
        let n = p.logits().len() as f64;
        assert!(n >= 1e5);
        let mean = p.logits().sum() / n;
        let var = p.logits().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = Array3::from_elem((2, 2, 2), 1.5);
        let before = params.clone();
        let mut state = AdamState::new(params.dim());
        adam_step(&mut state, &mut params, &Array3::zeros((2, 2, 2)), 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_constant_gradient_approaches_signed_learning_rate() {
        let mut params = Array3::zeros((1, 1, 2));
        let mut grads = Array3::zeros((1, 1, 2));
        grads[[0, 0, 0]] = 3.0;
        grads[[0, 0, 1]] = -0.25;
        let mut state = AdamState::new(params.dim());
        let mut prev = params.clone();
        let mut last_delta = [0.0f64; 2];
        for _ in 0..200 {
            prev.assign(&params);
            adam_step(&mut state, &mut params, &grads, 0.1).unwrap();
            last_delta[0] = params[[0, 0, 0]] - prev[[0, 0, 0]];
            last_delta[1] = params[[0, 0, 1]] - prev[[0, 0, 1]];
        }
        // steady-state step size is lr in the direction opposite the gradient
        assert!((last_delta[0] + 0.1).abs() < 1e-3, "{last_delta:?}");
        assert!((last_delta[1] - 0.1).abs() < 1e-3, "{last_delta:?}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = Array3::zeros((2, 2, 2));
        let grads = Array3::zeros((2, 2, 3));
        let mut state = AdamState::new(params.dim());
        assert!(matches!(
            adam_step(&mut state, &mut params, &grads, 0.1),
            Err(TdtError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tiny_experiment_learns_and_aligns() {
        let result = run_experiment(&tiny_config()).unwrap();
        assert_eq!(result.loss_trajectory.len(), 41);
        assert!(result.final_loss() < result.initial_loss());
        assert!(result.force_aligned(), "decode {:?}", result.decode.hypothesis);
    }

    #[test]
    fn experiments_are_bit_reproducible() {
        let a = run_experiment(&tiny_config()).unwrap();
        let b = run_experiment(&tiny_config()).unwrap();
        assert_eq!(a.loss_trajectory.len(), b.loss_trajectory.len());
        for (x, y) in a.loss_trajectory.iter().zip(b.loss_trajectory.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.decode, b.decode);
        for (x, y) in a.problem.logits().iter().zip(b.problem.logits().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sweep_validates_shared_dimensions() {
        let a = tiny_config();
        let mut b = tiny_config();
        b.u_len = 3;
        assert!(sweep(&[a.clone(), b]).is_err());
        assert!(sweep(&[]).is_err());
        let results = sweep(&[a.clone()]).unwrap();
        assert_eq!(results.len(), 1);
        // single-config sweep is identical to run_experiment
        let single = run_experiment(&a).unwrap();
        assert_eq!(results[0].loss_trajectory, single.loss_trajectory);
    }

    #[test]
    fn run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_experiment(&tiny_config()).unwrap();
        result.write_to_dir(dir.path()).unwrap();
        for name in [
            "config.json",
            "loss.csv",
            "alignment.csv",
            "alignment.pgm",
            "decode.json",
            "durations.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let config_json = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        assert!(config_json.contains("\"beta1\": 0.9"));
        assert!(config_json.contains("\"n_durations\": 4"));
    }
}
