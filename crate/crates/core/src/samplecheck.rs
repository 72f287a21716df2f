//! Distributional checks of the sampler against scripted intensities.
//!
//! A scenario is a piecewise-exponential intensity whose pieces are revealed
//! one at a time by feedback events, exactly as an agent sees them during a
//! rollout. First-arrival samples from [`next_action`] are compared with the
//! analytic CDF `1 − exp(−Λ(t))` and with Ogata thinning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::episode_rng;
use crate::error::{precondition, Result};
use crate::mtpp::{EpisodeHistory, Event, IntensitySegment};
use crate::sampler::{next_action, thinning_first_arrival, ActionPolicy, FeedbackSource, Hazard};

/// Pieces `(start, c, w)`: `λ(t) = c·e^{w(t − start)}` until the next start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub pieces: Vec<(f64, f64, f64)>,
    pub horizon: f64,
}

impl Scenario {
    pub fn new(name: &str, pieces: Vec<(f64, f64, f64)>, horizon: f64) -> Result<Self> {
        if pieces.first().map(|p| p.0) != Some(0.0) || pieces.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(precondition(
                "pieces must start at 0 with increasing starts",
            ));
        }
        if pieces.iter().any(|p| !(p.1 > 0.0)) || pieces.last().is_some_and(|p| p.0 >= horizon) {
            return Err(precondition(
                "pieces need positive levels and must start before the horizon",
            ));
        }
        Ok(Self {
            name: name.to_string(),
            pieces,
            horizon,
        })
    }

    fn segment(&self, k: usize) -> IntensitySegment {
        let (start, c, w) = self.pieces[k];
        IntensitySegment { c, w, t_ref: start }
    }

    /// `Λ(0, t)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let t = t.min(self.horizon);
        let mut total = 0.0;
        for (k, p) in self.pieces.iter().enumerate() {
            if p.0 >= t {
                break;
            }
            let end = self.pieces.get(k + 1).map_or(t, |q| q.0.min(t));
            total += self.segment(k).cumulative(end);
        }
        total
    }

    /// Probability that the first arrival is at or before `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        -(-self.cumulative(t)).exp_m1()
    }
}

struct ScriptedPolicy<'a> {
    scenario: &'a Scenario,
    piece: usize,
}

impl ActionPolicy for ScriptedPolicy<'_> {
    type Hazard = IntensitySegment;

    fn hazard(&self, now: f64) -> Result<IntensitySegment> {
        Ok(self.scenario.segment(self.piece).rebased(now))
    }

    fn observe(&mut self, _event: &Event) -> Result<()> {
        self.piece += 1;
        Ok(())
    }
}

struct PieceBreaks<'a> {
    scenario: &'a Scenario,
    next: usize,
}

impl FeedbackSource for PieceBreaks<'_> {
    fn next_feedback_before(&mut self, limit: f64) -> Result<Option<Event>> {
        match self.scenario.pieces.get(self.next) {
            Some(&(start, _, _)) if start < limit => {
                self.next += 1;
                Ok(Some(Event::feedback(start, None)))
            }
            _ => Ok(None),
        }
    }
}

/// One first-arrival draw through the online sampler; `∞` when no arrival
/// happens before the horizon.
pub fn sample_first_arrival(scenario: &Scenario, seed: u64, index: u64) -> Result<f64> {
    let mut rng = episode_rng(seed, 0, index);
    let mut policy = ScriptedPolicy { scenario, piece: 0 };
    let mut breaks = PieceBreaks { scenario, next: 1 };
    let mut history = EpisodeHistory::new(scenario.horizon)?;
    let outcome = next_action(
        &mut policy,
        &mut breaks,
        &mut history,
        0.0,
        scenario.horizon,
        &mut rng,
    )?;
    Ok(outcome.time().unwrap_or(f64::INFINITY))
}

/// One first-arrival draw by thinning the fully known intensity.
pub fn thinning_sample(scenario: &Scenario, seed: u64, index: u64) -> f64 {
    let mut rng = episode_rng(seed, 1, index);
    thinning_first_arrival(&scenario.pieces, scenario.horizon, &mut rng).unwrap_or(f64::INFINITY)
}

/// `sup |F_n − F|` for a sample that may contain `∞` (no arrival).
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        if !x.is_finite() {
            break;
        }
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    // Past the last finite point the empirical CDF is flat.
    let finite = sorted.iter().filter(|x| x.is_finite()).count() as f64;
    d.max((cdf(f64::MAX) - finite / n).abs())
}

/// Two-sample `sup |F_a − F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        if !x.is_finite() {
            break;
        }
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub samples: usize,
    pub ks_analytic: f64,
    pub ks_thinning_analytic: f64,
    pub ks_sampler_thinning: f64,
    pub no_arrival_fraction: f64,
}

impl ScenarioReport {
    pub fn worst(&self) -> f64 {
        self.ks_analytic
            .max(self.ks_thinning_analytic)
            .max(self.ks_sampler_thinning)
    }
}

pub fn check_scenario(scenario: &Scenario, samples: usize, seed: u64) -> Result<ScenarioReport> {
    let online: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| sample_first_arrival(scenario, seed, i))
        .collect::<Result<_>>()?;
    let thinned: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| thinning_sample(scenario, seed, i))
        .collect();
    let cdf = |t: f64| scenario.cdf(t);
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        samples,
        ks_analytic: ks_statistic(&online, cdf),
        ks_thinning_analytic: ks_statistic(&thinned, cdf),
        ks_sampler_thinning: ks_two_sample(&online, &thinned),
        no_arrival_fraction: online.iter().filter(|x| !x.is_finite()).count() as f64
            / samples as f64,
    })
}

/// The standard suite: one, two and three pieces, including a rebase in the
/// middle of a piece and a decaying piece that would go extinct but is
/// rescued by a later one.
pub fn standard_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new("one piece, decaying", vec![(0.0, 1.5, -0.4)], 20.0),
        Scenario::new(
            "two pieces, mid-interval rebase",
            vec![(0.0, 0.6, 0.3), (0.8, 2.5, -0.7)],
            20.0,
        ),
        Scenario::new(
            "three pieces, extinction then rescue",
            vec![(0.0, 0.4, -3.0), (1.0, 0.05, -1.0), (2.5, 0.3, 0.5)],
            20.0,
        ),
    ]
    .into_iter()
    .collect::<Result<_>>()
    .expect("scenarios are well formed")
}
