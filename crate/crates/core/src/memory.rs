//! Spaced-repetition environment.
//!
//! A simulated student recalls item `i`, last reviewed at `η`, with
//! probability `exp(−n_i·(t − η))`. Each review multiplies the forgetting
//! rate by `1 − α` after a successful recall and by `1 + β` after a lapse.
//! The agent's actions are reviews (mark = item index); every review
//! immediately produces a feedback event whose mark encodes the item and
//! the outcome. The episode reward is the fraction of items recalled in a
//! sampled test at `T + τ`.

use std::collections::VecDeque;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvEpisode, Environment, EpisodeRng};
use crate::error::{precondition, Error, Result};
use crate::mtpp::{EpisodeHistory, Event, TIE_EPSILON};
use crate::sampler::FeedbackSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    /// Initial forgetting rate per time unit.
    pub n0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub alpha: f64,
    pub beta: f64,
    pub items: Vec<Item>,
    pub horizon: f64,
    pub test_delay: f64,
}

impl MemoryConfig {
    /// Synthetic student: `count` items with `n0` log-uniform on `[lo, hi]`.
    pub fn synthetic(count: usize, n0_range: (f64, f64), seed: u64) -> Self {
        let mut rng = crate::env::episode_rng(seed, u64::MAX, 0);
        let (lo, hi) = (n0_range.0.ln(), n0_range.1.ln());
        let items = (0..count)
            .map(|i| Item {
                id: format!("item{i}"),
                n0: (lo + (hi - lo) * rng.random::<f64>()).exp(),
            })
            .collect();
        Self {
            alpha: 0.5,
            beta: 0.2,
            items,
            horizon: 14.0,
            test_delay: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.items.is_empty() {
            return Err(Error::Config("at least one item is required".into()));
        }
        if let Some(item) = self
            .items
            .iter()
            .find(|i| !(i.n0 >= 0.0 && i.n0.is_finite()))
        {
            return Err(Error::Config(format!(
                "item {} has invalid n0 {}",
                item.id, item.n0
            )));
        }
        if !(self.horizon > 0.0 && self.test_delay >= 0.0) {
            return Err(Error::Config(
                "horizon must be positive and test delay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    /// Size of the feedback-mark vocabulary (`2 × items`).
    pub fn feedback_vocabulary(&self) -> usize {
        2 * self.items.len()
    }
}

/// Feedback mark for a review outcome.
pub fn feedback_mark(item: usize, recalled: bool) -> usize {
    2 * item + usize::from(recalled)
}

/// Inverse of [`feedback_mark`].
pub fn decode_feedback_mark(mark: usize) -> (usize, bool) {
    (mark / 2, mark % 2 == 1)
}

/// Reads an item-set file: one `id n0` pair per line (comma or whitespace
/// separated), `#` comments allowed.
pub fn parse_items<R: BufRead>(input: R) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let bad = |message: String| Error::Ingestion {
            line: i + 1,
            message,
        };
        if fields.len() != 2 {
            return Err(bad(format!("expected `id n0`, got {body:?}")));
        }
        let n0: f64 = fields[1]
            .parse()
            .map_err(|_| bad(format!("invalid n0 {:?}", fields[1])))?;
        if !(n0 >= 0.0 && n0.is_finite()) {
            return Err(bad(format!("n0 must be non-negative, got {n0}")));
        }
        items.push(Item {
            id: fields[0].to_string(),
            n0,
        });
    }
    Ok(items)
}

/// Per-item forgetting rates and last review times.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    rates: Vec<f64>,
    last_review: Vec<Option<f64>>,
    alpha: f64,
    beta: f64,
}

impl StudentState {
    pub fn new(config: &MemoryConfig) -> Self {
        Self {
            rates: config.items.iter().map(|i| i.n0).collect(),
            last_review: vec![None; config.items.len()],
            alpha: config.alpha,
            beta: config.beta,
        }
    }

    pub fn rate(&self, item: usize) -> f64 {
        self.rates[item]
    }

    pub fn last_review(&self, item: usize) -> Option<f64> {
        self.last_review[item]
    }

    pub fn item_count(&self) -> usize {
        self.rates.len()
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.rates.len() {
            return Err(precondition(format!("unknown item {item}")));
        }
        Ok(())
    }

    /// Recall probability at `t`; zero for an item never reviewed.
    pub fn recall_prob(&self, item: usize, t: f64) -> Result<f64> {
        self.check_item(item)?;
        match self.last_review[item] {
            None => Ok(0.0),
            Some(eta) if t < eta => Err(precondition(format!(
                "recall queried at {t} before the last review at {eta}"
            ))),
            Some(eta) => Ok((-self.rates[item] * (t - eta)).exp()),
        }
    }

    /// Applies a review with a known outcome.
    pub fn apply_review(&mut self, item: usize, t: f64, recalled: bool) -> Result<()> {
        self.check_item(item)?;
        if let Some(eta) = self.last_review[item] {
            if t < eta {
                return Err(precondition(format!(
                    "review at {t} before the last review at {eta}"
                )));
            }
        }
        self.rates[item] *= if recalled {
            1.0 - self.alpha
        } else {
            1.0 + self.beta
        };
        self.last_review[item] = Some(t);
        Ok(())
    }

    /// Reviews `item` at `t`: samples the recall outcome, updates the
    /// forgetting rate and returns the feedback event.
    ///
    /// A first review has nothing to recall and always counts as a lapse.
    pub fn review<R: Rng + ?Sized>(&mut self, item: usize, t: f64, rng: &mut R) -> Result<Event> {
        let p = self.recall_prob(item, t)?;
        let recalled = rng.random::<f64>() < p;
        self.apply_review(item, t, recalled)?;
        Ok(Event::feedback(
            t + TIE_EPSILON,
            Some(feedback_mark(item, recalled)),
        ))
    }

    /// Fraction of items recalled in a sampled test at `t`.
    pub fn test_recall<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        let mut recalled = 0usize;
        for item in 0..self.rates.len() {
            let p = self.recall_prob(item, t)?;
            if rng.random::<f64>() < p {
                recalled += 1;
            }
        }
        Ok(recalled as f64 / self.rates.len() as f64)
    }
}

/// Sampled recall at `T + τ`, averaged over items.
pub fn episode_reward<R: Rng + ?Sized>(
    state: &StudentState,
    horizon: f64,
    test_delay: f64,
    rng: &mut R,
) -> Result<f64> {
    state.test_recall(horizon + test_delay, rng)
}

#[derive(Debug, Clone)]
pub struct MemoryEnv {
    config: MemoryConfig,
}

impl MemoryEnv {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }
}

#[derive(Debug, Clone)]
pub struct MemoryEpisode {
    student: StudentState,
    pending: VecDeque<Event>,
    horizon: f64,
    test_delay: f64,
}

impl MemoryEpisode {
    pub fn student(&self) -> &StudentState {
        &self.student
    }
}

impl FeedbackSource for MemoryEpisode {
    fn next_feedback_before(&mut self, limit: f64) -> Result<Option<Event>> {
        match self.pending.front() {
            Some(e) if e.time < limit => Ok(self.pending.pop_front()),
            _ => Ok(None),
        }
    }
}

impl EnvEpisode for MemoryEpisode {
    fn on_action(&mut self, action: &Event, rng: &mut EpisodeRng) -> Result<()> {
        let item = action
            .mark
            .ok_or_else(|| Error::Environment("a review must name an item".into()))?;
        let feedback = self
            .student
            .review(item, action.time, rng)
            .map_err(|e| Error::Environment(e.to_string()))?;
        if feedback.time <= self.horizon {
            self.pending.push_back(feedback);
        }
        Ok(())
    }

    fn reward(&mut self, _history: &EpisodeHistory, rng: &mut EpisodeRng) -> Result<f64> {
        episode_reward(&self.student, self.horizon, self.test_delay, rng)
    }
}

impl Environment for MemoryEnv {
    type Episode = MemoryEpisode;

    fn horizon(&self) -> f64 {
        self.config.horizon
    }

    fn begin(&self, _index: u64, _rng: &mut EpisodeRng) -> Result<MemoryEpisode> {
        Ok(MemoryEpisode {
            student: StudentState::new(&self.config),
            pending: VecDeque::new(),
            horizon: self.config.horizon,
            test_delay: self.config.test_delay,
        })
    }
}
