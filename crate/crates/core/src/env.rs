//! The episode contract between agents and environments, and the rollout
//! loop that joins them.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mtpp::{EpisodeHistory, Event, IntensitySegment};
use crate::policy::{intensity_segment, mark_pmf, step_hidden, HiddenState, PolicyParams};
use crate::sampler::{next_action, ActionPolicy, FeedbackSource, SampleOutcome};

/// Random stream owned by one episode.
pub type EpisodeRng = ChaCha8Rng;

/// Counter-based stream keyed by `(seed, iteration, episode)`.
///
/// Streams for different keys are independent, so episodes can be rolled out
/// in any order or in parallel with identical results.
pub fn episode_rng(seed: u64, iteration: u64, episode: u64) -> EpisodeRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 32) ^ episode);
    rng
}

/// A black-box environment that produces one episode at a time.
pub trait Environment: Sync {
    type Episode: EnvEpisode;

    fn horizon(&self) -> f64;

    /// Starts episode number `index`.
    fn begin(&self, index: u64, rng: &mut EpisodeRng) -> Result<Self::Episode>;
}

/// One running episode: emits feedback, reacts to actions and pays a reward
/// at the horizon.
pub trait EnvEpisode: FeedbackSource {
    fn on_action(&mut self, action: &Event, rng: &mut EpisodeRng) -> Result<()>;

    /// Terminal reward `R*(T)`; larger is better.
    fn reward(&mut self, history: &EpisodeHistory, rng: &mut EpisodeRng) -> Result<f64>;
}

/// A scheduler that decides when to act and which mark to act with.
pub trait Agent: ActionPolicy {
    fn choose_mark(&mut self, time: f64, rng: &mut EpisodeRng) -> Result<Option<usize>>;
}

/// Creates a fresh agent for every episode.
pub trait AgentFactory: Sync {
    type Agent: Agent;

    fn spawn(&self) -> Self::Agent;
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub history: EpisodeHistory,
    pub reward: f64,
}

impl Rollout {
    pub fn action_count(&self) -> usize {
        self.history.action_count()
    }
}

/// Plays one episode of `agent` against `env`.
pub fn rollout<E, A>(env: &E, agent: &mut A, index: u64, rng: &mut EpisodeRng) -> Result<Rollout>
where
    E: Environment,
    A: Agent,
{
    let horizon = env.horizon();
    let mut episode = env.begin(index, rng)?;
    let mut history = EpisodeHistory::new(horizon)?;
    let mut now = 0.0;
    loop {
        match next_action(agent, &mut episode, &mut history, now, horizon, rng)? {
            SampleOutcome::Time(t) => {
                let mark = agent.choose_mark(t, rng)?;
                let action = history.push(Event::action(t, mark))?;
                agent.observe(&action)?;
                episode.on_action(&action, rng)?;
                now = action.time;
                if now >= horizon {
                    break;
                }
            }
            SampleOutcome::Extinct => break,
        }
    }
    // Remaining feedback still belongs to the episode.
    while let Some(event) = episode.next_feedback_before(horizon)? {
        let event = history.push(event)?;
        agent.observe(&event)?;
    }
    let reward = episode.reward(&history, rng)?;
    if !reward.is_finite() {
        return Err(Error::Environment(format!("non-finite reward {reward}")));
    }
    Ok(Rollout { history, reward })
}

/// Plays episodes `0..count` of iteration `iteration` in parallel. Each
/// episode owns its stream, so results do not depend on scheduling.
pub fn rollouts<E, F>(
    env: &E,
    factory: &F,
    seed: u64,
    iteration: u64,
    count: usize,
) -> Result<Vec<Rollout>>
where
    E: Environment,
    F: AgentFactory,
{
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, iteration, i);
            rollout(env, &mut factory.spawn(), i, &mut rng)
        })
        .collect()
}

/// The recurrent policy acting as an agent.
#[derive(Debug, Clone)]
pub struct NeuralAgent<'a> {
    params: &'a PolicyParams,
    state: HiddenState,
    last_event: f64,
}

impl<'a> NeuralAgent<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        Self {
            params,
            state: params.initial_state(),
            last_event: 0.0,
        }
    }

    pub fn state(&self) -> &HiddenState {
        &self.state
    }
}

impl ActionPolicy for NeuralAgent<'_> {
    type Hazard = IntensitySegment;

    fn hazard(&self, now: f64) -> Result<IntensitySegment> {
        intensity_segment(self.params, &self.state, now)
    }

    fn observe(&mut self, event: &Event) -> Result<()> {
        self.state = step_hidden(self.params, &self.state, event, self.last_event)?;
        self.last_event = event.time;
        Ok(())
    }
}

impl Agent for NeuralAgent<'_> {
    fn choose_mark(&mut self, _time: f64, rng: &mut EpisodeRng) -> Result<Option<usize>> {
        if self.params.shape().action_marks.is_none() {
            return Ok(None);
        }
        let pmf = mark_pmf(self.params, &self.state)?;
        Ok(Some(sample_categorical(pmf.probs(), rng)))
    }
}

/// Factory handing out [`NeuralAgent`]s over a fixed parameter snapshot.
#[derive(Debug, Clone, Copy)]
pub struct NeuralPolicy<'a>(pub &'a PolicyParams);

impl<'a> AgentFactory for NeuralPolicy<'a> {
    type Agent = NeuralAgent<'a>;

    fn spawn(&self) -> NeuralAgent<'a> {
        NeuralAgent::new(self.0)
    }
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave u just above the last bucket.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Writes one JSON event per line.
pub fn write_events_jsonl<W: Write>(out: &mut W, events: &[Event]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(&line).map_err(|err| Error::Ingestion {
            line: i + 1,
            message: err.to_string(),
        })?;
        events.push(e);
    }
    Ok(events)
}
