//! Reference schedulers and equal-budget calibration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::broadcast::{FeedState, Priorities, SortingRule};
use crate::env::{rollouts, sample_categorical, Agent, AgentFactory, Environment, EpisodeRng};
use crate::error::{Error, Result};
use crate::memory::{decode_feedback_mark, MemoryConfig, StudentState};
use crate::mtpp::Event;
use crate::sampler::{ActionPolicy, Hazard, PiecewiseConstant};

/// Constant-rate scheduler; marks, if any, are uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformPoisson {
    rate: f64,
    marks: Option<usize>,
}

impl UniformPoisson {
    pub fn new(rate: f64, marks: Option<usize>) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("rate must be positive, got {rate}")));
        }
        if marks == Some(0) {
            return Err(Error::Config("mark vocabulary must be non-empty".into()));
        }
        Ok(Self { rate, marks })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl ActionPolicy for UniformPoisson {
    type Hazard = PiecewiseConstant;

    fn hazard(&self, now: f64) -> Result<PiecewiseConstant> {
        PiecewiseConstant::constant(now, self.rate)
    }

    fn observe(&mut self, _event: &Event) -> Result<()> {
        Ok(())
    }
}

impl Agent for UniformPoisson {
    fn choose_mark(&mut self, _time: f64, rng: &mut EpisodeRng) -> Result<Option<usize>> {
        Ok(self.marks.map(|n| sample_categorical(&vec![1.0; n], rng)))
    }
}

impl AgentFactory for UniformPoisson {
    type Agent = UniformPoisson;

    fn spawn(&self) -> UniformPoisson {
        *self
    }
}

/// Posts with intensity `κ·r(t)` where `r` is the agent's current rank.
///
/// The chrono flavor tracks a reverse-chronological feed; the priority
/// flavor (RQ*) tracks the priority-queue feed, including posts ageing out
/// of the top section.
#[derive(Debug, Clone, PartialEq)]
pub struct RedQueen {
    kappa: f64,
    rule: SortingRule,
    priorities: Priorities,
}

impl RedQueen {
    pub fn new(kappa: f64, rule: SortingRule, priorities: Priorities) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        Ok(Self {
            kappa,
            rule,
            priorities,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

#[derive(Debug, Clone)]
pub struct RedQueenAgent {
    kappa: f64,
    feed: FeedState,
    priorities: Priorities,
}

impl ActionPolicy for RedQueenAgent {
    type Hazard = PiecewiseConstant;

    fn hazard(&self, now: f64) -> Result<PiecewiseConstant> {
        let pieces = self
            .feed
            .rank_pieces(now)
            .into_iter()
            .map(|(t, r)| (t, self.kappa * r as f64))
            .collect();
        PiecewiseConstant::new(now, pieces)
    }

    fn observe(&mut self, event: &Event) -> Result<()> {
        if event.is_action() {
            self.feed.add_agent_post(event.time)
        } else {
            let source = event.mark.unwrap_or(0);
            self.feed
                .add_competitor_post(event.time, source, self.priorities.competitor(source))
        }
    }
}

impl Agent for RedQueenAgent {
    fn choose_mark(&mut self, _time: f64, _rng: &mut EpisodeRng) -> Result<Option<usize>> {
        Ok(None)
    }
}

impl AgentFactory for RedQueen {
    type Agent = RedQueenAgent;

    fn spawn(&self) -> RedQueenAgent {
        RedQueenAgent {
            kappa: self.kappa,
            feed: FeedState::new(self.rule, self.priorities.agent)
                .expect("rule validated by the environment"),
            priorities: self.priorities.clone(),
        }
    }
}

/// Reviews item `i` with intensity `κ·(1 − m_i(t))`, reading the true
/// recall probabilities from its own copy of the student model.
#[derive(Debug, Clone, PartialEq)]
pub struct Memorize {
    kappa: f64,
    config: MemoryConfig,
}

impl Memorize {
    pub fn new(kappa: f64, config: MemoryConfig) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        config.validate()?;
        Ok(Self { kappa, config })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

#[derive(Debug, Clone)]
pub struct MemorizeAgent {
    kappa: f64,
    student: StudentState,
    /// Reviews whose outcome has not been observed yet.
    awaiting: VecDeque<(usize, f64)>,
}

impl MemorizeAgent {
    pub fn student(&self) -> &StudentState {
        &self.student
    }

    fn recall(&self, item: usize, t: f64) -> f64 {
        self.student.recall_prob(item, t).unwrap_or(0.0)
    }
}

/// `κ·Σ_i (1 − m_i e^{−n_i(t − t_ref)})` with `m_i` the recall probability at
/// `t_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingHazard {
    t_ref: f64,
    kappa: f64,
    terms: Vec<(f64, f64)>,
}

impl ForgettingHazard {
    pub fn new(t_ref: f64, kappa: f64, terms: Vec<(f64, f64)>) -> Self {
        Self {
            t_ref,
            kappa,
            terms,
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        let d = t - self.t_ref;
        self.kappa
            * self
                .terms
                .iter()
                .map(|&(m, n)| 1.0 - m * (-n * d).exp())
                .sum::<f64>()
    }

    /// Rate as `t → ∞`.
    fn limit_rate(&self) -> f64 {
        self.kappa
            * self
                .terms
                .iter()
                .map(|&(m, n)| if n > 0.0 { 1.0 } else { 1.0 - m })
                .sum::<f64>()
    }
}

impl Hazard for ForgettingHazard {
    fn t_ref(&self) -> f64 {
        self.t_ref
    }

    fn cumulative(&self, t: f64) -> f64 {
        let d = t - self.t_ref;
        let sum: f64 = self
            .terms
            .iter()
            .map(|&(m, n)| {
                let decayed = if n > 0.0 { -(-n * d).exp_m1() / n } else { d };
                d - m * decayed
            })
            .sum();
        self.kappa * sum
    }

    fn invert(&self, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(self.t_ref);
        }
        if self.limit_rate() <= 0.0 {
            return None;
        }
        let mut hi = 1.0 / self.limit_rate();
        while self.cumulative(self.t_ref + hi) < target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        // Λ is convex, so Newton from the right stays right of the root;
        // bisection guards the rare step that leaves the bracket.
        let mut x = hi;
        for _ in 0..200 {
            let f = self.cumulative(self.t_ref + x) - target;
            if f == 0.0 {
                return Some(self.t_ref + x);
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let rate = self.rate(self.t_ref + x);
            let newton = x - f / rate;
            let next = if rate > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - x).abs() <= 1e-15 * x || hi - lo <= 1e-15 * hi {
                return Some(self.t_ref + next);
            }
            x = next;
        }
        Some(self.t_ref + hi)
    }
}

impl ActionPolicy for MemorizeAgent {
    type Hazard = ForgettingHazard;

    fn hazard(&self, now: f64) -> Result<ForgettingHazard> {
        let terms = (0..self.student.item_count())
            .map(|i| (self.recall(i, now), self.student.rate(i)))
            .collect();
        Ok(ForgettingHazard::new(now, self.kappa, terms))
    }

    fn observe(&mut self, event: &Event) -> Result<()> {
        if event.is_action() {
            if let Some(item) = event.mark {
                self.awaiting.push_back((item, event.time));
            }
            return Ok(());
        }
        let Some(mark) = event.mark else {
            return Ok(());
        };
        let (item, recalled) = decode_feedback_mark(mark);
        let at = match self.awaiting.iter().position(|&(i, _)| i == item) {
            Some(k) => self.awaiting.remove(k).expect("position is valid").1,
            None => event.time,
        };
        self.student.apply_review(item, at, recalled)
    }
}

impl Agent for MemorizeAgent {
    fn choose_mark(&mut self, time: f64, rng: &mut EpisodeRng) -> Result<Option<usize>> {
        let weights: Vec<f64> = (0..self.student.item_count())
            .map(|i| 1.0 - self.recall(i, time))
            .collect();
        if weights.iter().all(|&w| w <= 0.0) {
            return Ok(Some(sample_categorical(&vec![1.0; weights.len()], rng)));
        }
        Ok(Some(sample_categorical(&weights, rng)))
    }
}

impl AgentFactory for Memorize {
    type Agent = MemorizeAgent;

    fn spawn(&self) -> MemorizeAgent {
        MemorizeAgent {
            kappa: self.kappa,
            student: StudentState::new(&self.config),
            awaiting: VecDeque::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCalibration {
    /// Target mean number of actions per episode.
    pub target: f64,
    pub achieved: f64,
    /// Calibrated rate or scale constant.
    pub scale: f64,
}

/// Relative tolerance accepted by [`calibrate_budget`].
pub const BUDGET_TOLERANCE: f64 = 0.10;

/// Mean action count of `factory` over `episodes` seeded episodes.
pub fn mean_action_count<E, F>(env: &E, factory: &F, seed: u64, episodes: usize) -> Result<f64>
where
    E: Environment,
    F: AgentFactory,
{
    let runs = rollouts(env, factory, seed, 0, episodes)?;
    Ok(runs.iter().map(|r| r.action_count() as f64).sum::<f64>() / episodes as f64)
}

/// Rate of the uniform Poisson scheduler with mean count `target` over
/// `horizon`.
pub fn calibrate_poisson(target: f64, horizon: f64) -> Result<BudgetCalibration> {
    if !(target > 0.0 && horizon > 0.0) {
        return Err(Error::Config("target and horizon must be positive".into()));
    }
    Ok(BudgetCalibration {
        target,
        achieved: target,
        scale: target / horizon,
    })
}

/// Finds the scale at which `make(scale)` averages `target` actions per
/// episode, by bisection in log scale over common random numbers.
///
/// Fails if the count does not respond monotonically or the tolerance
/// cannot be met.
pub fn calibrate_budget<E, F, M>(
    env: &E,
    make: M,
    target: f64,
    initial: f64,
    episodes: usize,
    seed: u64,
) -> Result<BudgetCalibration>
where
    E: Environment,
    F: AgentFactory,
    M: Fn(f64) -> Result<F>,
{
    if !(target > 0.0 && initial > 0.0) || episodes == 0 {
        return Err(Error::Config(
            "calibration needs a positive target, initial scale and episode count".into(),
        ));
    }
    let count =
        |scale: f64| -> Result<f64> { mean_action_count(env, &make(scale)?, seed, episodes) };
    let (mut lo, mut hi) = (initial, initial);
    let (mut c_lo, mut c_hi) = {
        let c = count(initial)?;
        (c, c)
    };
    let mut guard = 0;
    while c_lo > target {
        lo /= 2.0;
        c_lo = count(lo)?;
        guard += 1;
        if guard > 60 {
            return Err(Error::Consistency(
                "calibration could not bracket the target from below".into(),
            ));
        }
    }
    while c_hi < target {
        hi *= 2.0;
        c_hi = count(hi)?;
        guard += 1;
        if guard > 120 {
            return Err(Error::Consistency(
                "calibration could not bracket the target from above".into(),
            ));
        }
    }
    let mut best = if (c_lo - target).abs() < (c_hi - target).abs() {
        (lo, c_lo)
    } else {
        (hi, c_hi)
    };
    for _ in 0..60 {
        if (best.1 - target).abs() <= 0.01 * target || hi / lo < 1.0 + 1e-9 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let c = count(mid)?;
        if c < c_lo - 1e-12 || c > c_hi + 1e-12 {
            return Err(Error::Consistency(format!(
                "action count is not monotone in the scale near {mid}"
            )));
        }
        if c < target {
            (lo, c_lo) = (mid, c);
        } else {
            (hi, c_hi) = (mid, c);
        }
        if (c - target).abs() < (best.1 - target).abs() {
            best = (mid, c);
        }
    }
    if (best.1 - target).abs() > BUDGET_TOLERANCE * target {
        return Err(Error::Consistency(format!(
            "calibration reached {} actions against a target of {target}",
            best.1
        )));
    }
    Ok(BudgetCalibration {
        target,
        achieved: best.1,
        scale: best.0,
    })
}
