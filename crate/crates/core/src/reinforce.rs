//! Batch REINFORCE with intensity and mark-entropy regularizers, Adam
//! updates, and evaluation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{episode_rng, rollout, AgentFactory, Environment, NeuralAgent, Rollout};
use crate::error::{precondition, Error, Result};
use crate::mtpp::EpisodeHistory;
use crate::policy::{episode_backward, GradientBundle, PolicyParams, RegularizerSpec};
use crate::stats::Summary;

/// Stream key reserved for evaluation episodes.
pub const EVAL_ITERATION: u64 = 0xFFFF_FFFF;

/// `lr(i) = base / (1 + decay·i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        self.base / (1.0 + self.decay * iteration as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of gradient steps.
    pub iterations: usize,
    /// Episodes per batch.
    pub episodes: usize,
    pub lr: LrSchedule,
    /// Weight of `∫λ²`.
    pub q_l: f64,
    /// Weight of `∫H(m)`.
    pub q_m: f64,
    pub seed: u64,
    #[serde(default)]
    pub use_mean_baseline: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config(
                "episodes per batch must be at least 1".into(),
            ));
        }
        if !(self.q_l >= 0.0 && self.q_m >= 0.0) {
            return Err(Error::Config(
                "regularizer weights must be non-negative".into(),
            ));
        }
        if !(self.lr.base > 0.0 && self.lr.decay >= 0.0 && self.lr.base.is_finite()) {
            return Err(Error::Config(
                "learning rate must be positive with a non-negative decay".into(),
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }

    fn regularizers(&self) -> RegularizerSpec {
        RegularizerSpec {
            intensity_sq: self.q_l > 0.0,
            mark_entropy: self.q_m > 0.0,
        }
    }
}

/// One rolled-out episode with the gradients of its log-likelihood and
/// regularizers.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub history: EpisodeHistory,
    pub reward: f64,
    pub bundle: GradientBundle,
}

impl EpisodeResult {
    pub fn penalized_reward(&self, q_l: f64, q_m: f64) -> f64 {
        self.reward - q_l * self.bundle.intensity_sq_integral - q_m * self.bundle.entropy_integral
    }
}

/// Plays one episode under `params` and differentiates it.
pub fn run_episode<E: Environment>(
    env: &E,
    params: &PolicyParams,
    spec: RegularizerSpec,
    index: u64,
    rng: &mut crate::env::EpisodeRng,
) -> Result<EpisodeResult> {
    let Rollout { history, reward } = rollout(env, &mut NeuralAgent::new(params), index, rng)?;
    let bundle = episode_backward(params, &history, spec)?;
    Ok(EpisodeResult {
        history,
        reward,
        bundle,
    })
}

/// Batch-mean ascent direction of the penalized reward.
///
/// Each episode contributes `(R − q_l∫λ² − q_m∫H − b̂)·∇log P − q_l∇∫λ² −
/// q_m∇∫H`, where `b̂` is the batch-mean penalized reward when
/// `use_mean_baseline` is set and zero otherwise.
pub fn estimate_gradient(
    batch: &[EpisodeResult],
    q_l: f64,
    q_m: f64,
    use_mean_baseline: bool,
) -> Result<Vec<f64>> {
    let first = batch.first().ok_or_else(|| precondition("empty batch"))?;
    let dim = first.bundle.grad_log_likelihood.len();
    let scores: Vec<f64> = batch.iter().map(|e| e.penalized_reward(q_l, q_m)).collect();
    let baseline = if use_mean_baseline {
        scores.iter().sum::<f64>() / scores.len() as f64
    } else {
        0.0
    };
    let mut grad = vec![0.0; dim];
    for (e, score) in batch.iter().zip(&scores) {
        let b = &e.bundle;
        if b.grad_log_likelihood.len() != dim {
            return Err(precondition("episode gradients have different shapes"));
        }
        let w = score - baseline;
        for (j, g) in grad.iter_mut().enumerate() {
            *g += w * b.grad_log_likelihood[j]
                - q_l * b.grad_intensity_sq[j]
                - q_m * b.grad_entropy[j];
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }
}

/// One Adam ascent step of size `lr`.
pub fn adam_step(
    params: &mut PolicyParams,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(precondition(
            "gradient, moments and parameters differ in length",
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalOverflow {
            tensor: params.tensor_at(i).to_string(),
        });
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut step = vec![0.0; grad.len()];
    for (j, &g) in grad.iter().enumerate() {
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
        step[j] = lr * (state.m[j] / c1) / ((state.v[j] / c2).sqrt() + cfg.epsilon);
    }
    params.add_scaled(&step, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_actions: f64,
    pub penalized_objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub records: Vec<IterationRecord>,
}

impl TrainingStats {
    pub const CSV_HEADER: &'static str =
        "iteration,mean_reward,mean_actions,penalized_objective,grad_norm";

    pub fn csv_row(r: &IterationRecord) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            r.iteration, r.mean_reward, r.mean_actions, r.penalized_objective, r.grad_norm
        )
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(out, "{}", Self::csv_row(r))?;
        }
        Ok(())
    }
}

/// Trains `params` in place; see [`train_with`].
pub fn train<E: Environment>(
    env: &E,
    params: PolicyParams,
    config: &TrainConfig,
) -> Result<(PolicyParams, TrainingStats)> {
    train_with(env, params, config, |_, _| Ok(()))
}

/// Runs `config.iterations` REINFORCE steps. `on_iteration` sees every record
/// together with the updated parameters.
///
/// Episodes of iteration `i` use streams `(seed, i, 0..episodes)` and are
/// reduced in episode order, so results are independent of thread count.
pub fn train_with<E, F>(
    env: &E,
    mut params: PolicyParams,
    config: &TrainConfig,
    mut on_iteration: F,
) -> Result<(PolicyParams, TrainingStats)>
where
    E: Environment,
    F: FnMut(&IterationRecord, &PolicyParams) -> Result<()>,
{
    config.validate()?;
    let spec = config.regularizers();
    if spec.mark_entropy && params.shape().action_marks.is_none() {
        return Err(Error::Config(
            "q_m > 0 needs a policy with action marks".into(),
        ));
    }
    let mut adam = AdamState::new(params.len());
    let mut stats = TrainingStats::default();
    for iteration in 0..config.iterations {
        let snapshot = &params;
        let batch: Vec<EpisodeResult> = (0..config.episodes as u64)
            .into_par_iter()
            .map(|e| {
                let mut rng = episode_rng(config.seed, iteration as u64, e);
                run_episode(env, snapshot, spec, e, &mut rng)
            })
            .collect::<Result<_>>()
            .map_err(|err| match err {
                Error::NumericalOverflow { .. } => err,
                other => Error::Environment(format!("iteration {iteration}: {other}")),
            })?;
        let grad = estimate_gradient(&batch, config.q_l, config.q_m, config.use_mean_baseline)?;
        let n = batch.len() as f64;
        let record = IterationRecord {
            iteration,
            mean_reward: batch.iter().map(|e| e.reward).sum::<f64>() / n,
            mean_actions: batch
                .iter()
                .map(|e| e.history.action_count() as f64)
                .sum::<f64>()
                / n,
            penalized_objective: batch
                .iter()
                .map(|e| e.penalized_reward(config.q_l, config.q_m))
                .sum::<f64>()
                / n,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        adam_step(
            &mut params,
            &grad,
            &mut adam,
            config.lr.at(iteration),
            &config.adam,
        )?;
        log::debug!(
            "iteration {iteration}: reward {:.6} actions {:.3}",
            record.mean_reward,
            record.mean_actions
        );
        stats.records.push(record);
        on_iteration(&record, &params)?;
    }
    Ok((params, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reward: Summary,
    pub actions: Summary,
}

/// Per-episode outcomes of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rewards: Vec<f64>,
    pub action_counts: Vec<f64>,
    pub summary: EvalSummary,
}

/// Plays `episodes` evaluation episodes of any scheduler.
pub fn evaluate<E, F>(env: &E, factory: &F, episodes: usize, seed: u64) -> Result<Evaluation>
where
    E: Environment,
    F: AgentFactory,
{
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let runs = crate::env::rollouts(env, factory, seed, EVAL_ITERATION, episodes)?;
    let rewards: Vec<f64> = runs.iter().map(|r| r.reward).collect();
    let action_counts: Vec<f64> = runs.iter().map(|r| r.action_count() as f64).collect();
    let summary = EvalSummary {
        reward: Summary::of(&rewards).expect("non-empty"),
        actions: Summary::of(&action_counts).expect("non-empty"),
    };
    Ok(Evaluation {
        rewards,
        action_counts,
        summary,
    })
}
