//! Feedback-free environments whose reward depends only on the action count.
//! Their optima are known in closed form, which makes them useful for
//! checking the trainer.

use serde::{Deserialize, Serialize};

use crate::env::{EnvEpisode, Environment, EpisodeRng};
use crate::error::{Error, Result};
use crate::mtpp::{EpisodeHistory, Event};
use crate::sampler::FeedbackSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CountReward {
    /// `R = N(T)`.
    Count,
    /// `R = −(N(T) − k)²`.
    Target { k: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountingEnv {
    horizon: f64,
    reward: CountReward,
}

impl CountingEnv {
    pub fn new(horizon: f64, reward: CountReward) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { horizon, reward })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CountingEpisode {
    reward: CountReward,
}

impl FeedbackSource for CountingEpisode {
    fn next_feedback_before(&mut self, _limit: f64) -> Result<Option<Event>> {
        Ok(None)
    }
}

impl EnvEpisode for CountingEpisode {
    fn on_action(&mut self, _action: &Event, _rng: &mut EpisodeRng) -> Result<()> {
        Ok(())
    }

    fn reward(&mut self, history: &EpisodeHistory, _rng: &mut EpisodeRng) -> Result<f64> {
        let n = history.action_count() as f64;
        Ok(match self.reward {
            CountReward::Count => n,
            CountReward::Target { k } => -(n - k).powi(2),
        })
    }
}

impl Environment for CountingEnv {
    type Episode = CountingEpisode;

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn begin(&self, _index: u64, _rng: &mut EpisodeRng) -> Result<CountingEpisode> {
        Ok(CountingEpisode {
            reward: self.reward,
        })
    }
}
