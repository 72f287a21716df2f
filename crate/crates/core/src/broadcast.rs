//! Smart-broadcasting environment.
//!
//! The agent posts into a follower's feed that also receives posts from
//! competing sources. Its rank `r(t)` is the number of posts shown above its
//! most recent one (0 is the top). Feeds are sorted either reverse
//! chronologically or with a priority section: posts younger than a dwell
//! time sit on top, ordered by poster priority, and older posts follow in
//! reverse chronological order.
//!
//! Competitor activity is replayed from logs. Rewards are exact integrals of
//! the piecewise-constant rank over the episode.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvEpisode, Environment, EpisodeRng};
use crate::error::{precondition, Error, Result};
use crate::mtpp::{EpisodeHistory, Event};
use crate::sampler::FeedbackSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Agent,
    Competitor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub time: f64,
    pub source: Source,
    pub priority: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SortingRule {
    ReverseChrono,
    PriorityQueue { dwell: f64 },
}

/// Which rank functional an episode pays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `−∫ r(t) dt`.
    AverageRank,
    /// `∫ I(r(t) < 1) dt`.
    TimeAtTop,
}

/// Priorities used by the priority-queue rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priorities {
    pub competitors: Vec<f64>,
    pub agent: f64,
}

impl Priorities {
    /// All posters share one priority.
    pub fn flat(sources: usize) -> Self {
        Self {
            competitors: vec![1.0; sources],
            agent: 1.0,
        }
    }

    /// `1/(1 + count)` per competitor, min-max rescaled to `[0, 1]`; the
    /// agent gets the median competitor priority.
    pub fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self::flat(0);
        }
        let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / (1.0 + c as f64)).collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let competitors: Vec<f64> = if hi > lo {
            raw.iter().map(|p| (p - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        let mut sorted = competitors.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let agent = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self { competitors, agent }
    }

    pub fn competitor(&self, source: usize) -> f64 {
        self.competitors.get(source).copied().unwrap_or(self.agent)
    }
}

/// One follower's wall. Posts are kept in arrival order; later entries are
/// newer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedState {
    rule: SortingRule,
    agent_priority: f64,
    posts: Vec<Post>,
    agent_posts: Vec<usize>,
}

impl FeedState {
    /// A wall holding only the agent's post at time 0.
    pub fn new(rule: SortingRule, agent_priority: f64) -> Result<Self> {
        if let SortingRule::PriorityQueue { dwell } = rule {
            if !(dwell >= 0.0 && dwell.is_finite()) {
                return Err(precondition(format!(
                    "dwell must be non-negative, got {dwell}"
                )));
            }
        }
        let mut feed = Self {
            rule,
            agent_priority,
            posts: Vec::new(),
            agent_posts: Vec::new(),
        };
        feed.add_agent_post(0.0)?;
        Ok(feed)
    }

    pub fn rule(&self) -> SortingRule {
        self.rule
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    fn push(&mut self, post: Post) -> Result<()> {
        if let Some(last) = self.posts.last() {
            if post.time < last.time {
                return Err(precondition(format!(
                    "post at {} precedes the wall's last post at {}",
                    post.time, last.time
                )));
            }
        }
        if post.time < 0.0 {
            return Err(precondition("post times must be non-negative"));
        }
        self.posts.push(post);
        Ok(())
    }

    pub fn add_agent_post(&mut self, time: f64) -> Result<()> {
        self.push(Post {
            time,
            source: Source::Agent,
            priority: self.agent_priority,
        })?;
        self.agent_posts.push(self.posts.len() - 1);
        Ok(())
    }

    pub fn add_competitor_post(&mut self, time: f64, source: usize, priority: f64) -> Result<()> {
        self.push(Post {
            time,
            source: Source::Competitor(source),
            priority,
        })
    }

    /// Position of the agent's most recent post at `t` (right-continuous).
    pub fn rank(&self, t: f64) -> usize {
        let visible = self.posts.partition_point(|p| p.time <= t);
        let Some(&a) =
            self.agent_posts[..self.agent_posts.partition_point(|&i| i < visible)].last()
        else {
            return 0;
        };
        let newer = visible - a - 1;
        match self.rule {
            SortingRule::ReverseChrono => newer,
            SortingRule::PriorityQueue { dwell } => {
                let mine = &self.posts[a];
                // Expiry is compared as `time + dwell` so it matches the breakpoints exactly.
                if t >= mine.time + dwell {
                    // In the bulk: everything newer is above, nothing older is.
                    return newer;
                }
                let top_start = self.posts[..visible].partition_point(|p| t >= p.time + dwell);
                (top_start..visible)
                    .filter(|&j| j != a)
                    .filter(|&j| {
                        let p = &self.posts[j];
                        p.priority > mine.priority || (p.priority == mine.priority && j > a)
                    })
                    .count()
            }
        }
    }

    /// Times in `(from, to)` at which the rank can change, sorted.
    fn breakpoints(&self, from: f64, to: f64) -> Vec<f64> {
        let mut points: Vec<f64> = self.posts.iter().map(|p| p.time).collect();
        if let SortingRule::PriorityQueue { dwell } = self.rule {
            points.extend(self.posts.iter().map(|p| p.time + dwell));
        }
        points.retain(|&t| t > from && t < to);
        points.sort_by(f64::total_cmp);
        points.dedup();
        points
    }

    /// The rank as `(start, rank)` pieces covering `[from, ∞)`, assuming no
    /// new posts arrive after `from`.
    pub fn rank_pieces(&self, from: f64) -> Vec<(f64, usize)> {
        let mut pieces = vec![(from, self.rank(from))];
        for t in self.breakpoints(from, f64::INFINITY) {
            let r = self.rank(t);
            if r != pieces.last().map_or(usize::MAX, |p| p.1) {
                pieces.push((t, r));
            }
        }
        pieces
    }

    fn integrate(&self, horizon: f64, probes: &[f64], f: impl Fn(usize) -> f64) -> f64 {
        let mut grid = vec![0.0];
        grid.extend(self.breakpoints(0.0, horizon));
        grid.extend(probes.iter().copied().filter(|&t| t > 0.0 && t < horizon));
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid.push(horizon);
        grid.windows(2)
            .map(|w| f(self.rank(w[0])) * (w[1] - w[0]))
            .sum()
    }

    /// `∫₀ᵀ r(t) dt`; lower is better.
    pub fn rank_integral(&self, horizon: f64) -> f64 {
        self.rank_integral_with_probes(horizon, &[])
    }

    /// `∫₀ᵀ I(r(t) < 1) dt`.
    pub fn time_at_top(&self, horizon: f64) -> f64 {
        self.time_at_top_with_probes(horizon, &[])
    }

    /// As [`Self::rank_integral`] with extra grid points that must not
    /// change the value.
    pub fn rank_integral_with_probes(&self, horizon: f64, probes: &[f64]) -> f64 {
        self.integrate(horizon, probes, |r| r as f64)
    }

    pub fn time_at_top_with_probes(&self, horizon: f64, probes: &[f64]) -> f64 {
        self.integrate(horizon, probes, |r| if r < 1 { 1.0 } else { 0.0 })
    }
}

/// `∫₀ᵀ r(t) dt` over a complete trace.
pub fn reward_rank(feed: &FeedState, horizon: f64) -> f64 {
    feed.rank_integral(horizon)
}

/// `∫₀ᵀ I(r(t) < 1) dt` over a complete trace.
pub fn reward_time_at_top(feed: &FeedState, horizon: f64) -> f64 {
    feed.time_at_top(horizon)
}

/// One competitor post in a replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub t: f64,
    pub src: String,
}

/// Absolute train and test windows of a replay log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: [f64; 2],
    pub test: [f64; 2],
}

impl SplitManifest {
    pub fn empty() -> Self {
        Self {
            train: [0.0, 0.0],
            test: [0.0, 0.0],
        }
    }

    pub fn test_length(&self) -> f64 {
        self.test[1] - self.test[0]
    }

    pub fn train_length(&self) -> f64 {
        self.train[1] - self.train[0]
    }
}

/// Competitor posts relative to a window start, with source indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Window {
    pub events: Vec<(f64, usize)>,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    records: Vec<Record>,
    split: SplitManifest,
    sources: Vec<String>,
    source_of: Vec<usize>,
}

impl ReplayLog {
    pub fn new(records: Vec<Record>, split: SplitManifest) -> Result<Self> {
        if let Some(i) = records.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Ingestion {
                line: i + 2,
                message: "records are not sorted by time".into(),
            });
        }
        if let Some(i) = records.iter().position(|r| !r.t.is_finite()) {
            return Err(Error::Ingestion {
                line: i + 1,
                message: "non-finite time".into(),
            });
        }
        let [a, b] = split.train;
        let [c, d] = split.test;
        if !(a <= b && b <= c && c <= d) {
            return Err(Error::Config(format!(
                "split windows must be ordered, got {split:?}"
            )));
        }
        let names: BTreeMap<&str, ()> = records.iter().map(|r| (r.src.as_str(), ())).collect();
        let sources: Vec<String> = names.keys().map(|s| s.to_string()).collect();
        let source_of = records
            .iter()
            .map(|r| sources.binary_search(&r.src).expect("source listed"))
            .collect();
        Ok(Self {
            records,
            split,
            sources,
            source_of,
        })
    }

    /// Parses `{"t": .., "src": ..}` lines. Field names are strict.
    pub fn read_records<R: BufRead>(input: R) -> Result<Vec<Record>> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(records)
    }

    pub fn read_manifest(text: &str) -> Result<SplitManifest> {
        serde_json::from_str(text).map_err(|e| Error::Ingestion {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write_records<W: std::io::Write>(records: &[Record], out: &mut W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self) -> &SplitManifest {
        &self.split
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    /// Posts in `[start, end)`, shifted to start at 0.
    pub fn window(&self, start: f64, end: f64) -> Window {
        let lo = self.records.partition_point(|r| r.t < start);
        let hi = self.records.partition_point(|r| r.t < end);
        Window {
            events: (lo..hi)
                .map(|i| (self.records[i].t - start, self.source_of[i]))
                .collect(),
            length: end - start,
        }
    }

    pub fn test_window(&self) -> Window {
        self.window(self.split.test[0], self.split.test[1])
    }

    /// Posts per source inside the training window.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.sources.len()];
        let [a, b] = self.split.train;
        for (r, &s) in self.records.iter().zip(&self.source_of) {
            if r.t >= a && r.t < b {
                counts[s] += 1;
            }
        }
        counts
    }

    pub fn priorities(&self) -> Priorities {
        Priorities::from_counts(&self.train_counts())
    }
}

/// Test-window length whose expected number of posts is `target`, using the
/// training-window rate.
pub fn test_length_for(train_count: usize, train_length: f64, target: f64) -> Option<f64> {
    (train_count > 0 && train_length > 0.0).then(|| target * train_length / train_count as f64)
}

/// How a synthetic competitor posts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CompetitorSpec {
    /// Homogeneous Poisson posting.
    Poisson { rate: f64 },
    /// Poisson burst onsets; each burst holds a geometric number of posts
    /// (mean `mean_size`) spaced by exponential gaps of mean `spacing`.
    Bursts {
        rate: f64,
        mean_size: f64,
        spacing: f64,
    },
    /// Fixed post times.
    Scripted { times: Vec<f64> },
}

fn exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    -mean * (1.0 - rng.random::<f64>()).ln()
}

fn poisson_times<R: Rng + ?Sized>(rng: &mut R, rate: f64, horizon: f64) -> Vec<f64> {
    let mut times = Vec::new();
    if rate <= 0.0 {
        return times;
    }
    let mut t = exponential(rng, 1.0 / rate);
    while t < horizon {
        times.push(t);
        t += exponential(rng, 1.0 / rate);
    }
    times
}

/// Competitor posts on `[0, horizon)`, source `k` named `c{k}`. Each source
/// draws from its own stream so sources are independent.
pub fn synth_competitors(specs: &[CompetitorSpec], horizon: f64, seed: u64) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let mut rng = crate::env::episode_rng(seed, u64::from(u32::MAX), k as u64);
        let times = match spec {
            CompetitorSpec::Poisson { rate } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return Err(Error::Config(format!(
                        "competitor {k}: invalid rate {rate}"
                    )));
                }
                poisson_times(&mut rng, *rate, horizon)
            }
            CompetitorSpec::Bursts {
                rate,
                mean_size,
                spacing,
            } => {
                if !(*rate >= 0.0 && *mean_size >= 1.0 && *spacing > 0.0) {
                    return Err(Error::Config(format!(
                        "competitor {k}: invalid burst parameters"
                    )));
                }
                let mut times = Vec::new();
                for onset in poisson_times(&mut rng, *rate, horizon) {
                    let mut t = onset;
                    loop {
                        if t < horizon {
                            times.push(t);
                        }
                        if rng.random::<f64>() < 1.0 / mean_size {
                            break;
                        }
                        t += exponential(&mut rng, *spacing);
                    }
                }
                times
            }
            CompetitorSpec::Scripted { times } => times
                .iter()
                .copied()
                .filter(|&t| t >= 0.0 && t < horizon)
                .collect(),
        };
        records.extend(times.into_iter().map(|t| Record {
            t,
            src: format!("c{k}"),
        }));
    }
    records.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.src.cmp(&b.src)));
    Ok(records)
}

/// A synthetic log with a training window `[0, train)` followed by a test
/// window `[train, train + test)`.
pub fn synthetic_log(
    specs: &[CompetitorSpec],
    train: f64,
    test: f64,
    seed: u64,
) -> Result<ReplayLog> {
    let records = synth_competitors(specs, train + test, seed)?;
    ReplayLog::new(
        records,
        SplitManifest {
            train: [0.0, train],
            test: [train, train + test],
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Episodes replay uniformly placed windows of the training period.
    Train,
    /// Every episode replays the test window.
    Test,
}

#[derive(Debug, Clone)]
pub struct BroadcastEnv {
    log: ReplayLog,
    rule: SortingRule,
    objective: Objective,
    priorities: Priorities,
    mode: WindowMode,
    horizon: f64,
    test_window: Window,
}

impl BroadcastEnv {
    /// Episodes last as long as the log's test window.
    pub fn new(
        log: ReplayLog,
        rule: SortingRule,
        objective: Objective,
        mode: WindowMode,
    ) -> Result<Self> {
        let horizon = log.split().test_length();
        if horizon <= 0.0 {
            return Err(Error::Config(
                "the test window must have positive length".into(),
            ));
        }
        let priorities = match rule {
            SortingRule::ReverseChrono => Priorities::flat(log.sources().len()),
            SortingRule::PriorityQueue { .. } => log.priorities(),
        };
        let test_window = log.test_window();
        Ok(Self {
            log,
            rule,
            objective,
            priorities,
            mode,
            horizon,
            test_window,
        })
    }

    pub fn with_mode(&self, mode: WindowMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn log(&self) -> &ReplayLog {
        &self.log
    }

    pub fn rule(&self) -> SortingRule {
        self.rule
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn priorities(&self) -> &Priorities {
        &self.priorities
    }

    /// Size of the feedback-mark vocabulary (one mark per source).
    pub fn feedback_vocabulary(&self) -> usize {
        self.log.sources().len().max(1)
    }

    /// Starts an episode replaying `window`.
    pub fn episode_for(&self, window: &Window) -> Result<BroadcastEpisode> {
        let pending = window
            .events
            .iter()
            .filter(|(t, _)| *t < self.horizon)
            .map(|&(t, s)| Event::feedback(t, Some(s)))
            .collect();
        Ok(BroadcastEpisode {
            feed: FeedState::new(self.rule, self.priorities.agent)?,
            pending,
            priorities: self.priorities.clone(),
            horizon: self.horizon,
            objective: self.objective,
        })
    }
}

impl Environment for BroadcastEnv {
    type Episode = BroadcastEpisode;

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn begin(&self, _index: u64, rng: &mut EpisodeRng) -> Result<BroadcastEpisode> {
        match self.mode {
            WindowMode::Test => self.episode_for(&self.test_window),
            WindowMode::Train => {
                let [a, b] = self.log.split().train;
                let slack = (b - a - self.horizon).max(0.0);
                let start = a + slack * rng.random::<f64>();
                self.episode_for(&self.log.window(start, start + self.horizon))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BroadcastEpisode {
    feed: FeedState,
    pending: VecDeque<Event>,
    priorities: Priorities,
    horizon: f64,
    objective: Objective,
}

impl BroadcastEpisode {
    pub fn feed(&self) -> &FeedState {
        &self.feed
    }
}

impl FeedbackSource for BroadcastEpisode {
    fn next_feedback_before(&mut self, limit: f64) -> Result<Option<Event>> {
        match self.pending.front() {
            Some(e) if e.time < limit => {
                let e = self.pending.pop_front().expect("front exists");
                let source = e.mark.expect("competitor posts carry a source");
                self.feed.add_competitor_post(
                    e.time,
                    source,
                    self.priorities.competitor(source),
                )?;
                Ok(Some(e))
            }
            _ => Ok(None),
        }
    }
}

impl EnvEpisode for BroadcastEpisode {
    fn on_action(&mut self, action: &Event, _rng: &mut EpisodeRng) -> Result<()> {
        self.feed
            .add_agent_post(action.time)
            .map_err(|e| Error::Environment(e.to_string()))
    }

    fn reward(&mut self, _history: &EpisodeHistory, _rng: &mut EpisodeRng) -> Result<f64> {
        Ok(match self.objective {
            Objective::AverageRank => -reward_rank(&self.feed, self.horizon),
            Objective::TimeAtTop => reward_time_at_top(&self.feed, self.horizon),
        })
    }
}

/// Replays one window against `agent` and returns the history and reward.
pub fn replay_episode<A: crate::env::Agent>(
    env: &BroadcastEnv,
    window: &Window,
    agent: &mut A,
    rng: &mut EpisodeRng,
) -> Result<crate::env::Rollout> {
    struct Fixed<'a> {
        env: &'a BroadcastEnv,
        window: &'a Window,
    }
    impl Environment for Fixed<'_> {
        type Episode = BroadcastEpisode;
        fn horizon(&self) -> f64 {
            self.env.horizon
        }
        fn begin(&self, _index: u64, _rng: &mut EpisodeRng) -> Result<BroadcastEpisode> {
            self.env.episode_for(self.window)
        }
    }
    crate::env::rollout(&Fixed { env, window }, agent, 0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chrono_trace() -> FeedState {
        let mut f = FeedState::new(SortingRule::ReverseChrono, 1.0).unwrap();
        f.add_competitor_post(1.0, 0, 1.0).unwrap();
        f.add_agent_post(1.5).unwrap();
        f.add_competitor_post(2.0, 0, 1.0).unwrap();
        f
    }

    #[test]
    fn chrono_rank_trace() {
        let f = chrono_trace();
        let expect = [
            (0.0, 0),
            (0.5, 0),
            (1.0, 1),
            (1.25, 1),
            (1.5, 0),
            (1.9, 0),
            (2.0, 1),
            (2.9, 1),
        ];
        for (t, r) in expect {
            assert_eq!(f.rank(t), r, "t = {t}");
        }
    }

    #[test]
    fn chrono_integrals() {
        let f = chrono_trace();
        assert!((reward_rank(&f, 3.0) - 1.5).abs() < 1e-12);
        assert!((reward_time_at_top(&f, 3.0) - 1.5).abs() < 1e-12);
        let probes = [0.3, 1.0, 1.1, 1.7, 2.5, 2.999];
        assert_eq!(
            f.rank_integral_with_probes(3.0, &probes),
            reward_rank(&f, 3.0)
        );
        assert_eq!(
            f.time_at_top_with_probes(3.0, &probes),
            reward_time_at_top(&f, 3.0)
        );
    }

    #[test]
    fn empty_stream() {
        let f = FeedState::new(SortingRule::ReverseChrono, 0.5).unwrap();
        assert_eq!(f.rank(7.0), 0);
        assert_eq!(reward_rank(&f, 10.0), 0.0);
        assert_eq!(reward_time_at_top(&f, 10.0), 10.0);
    }

    #[test]
    fn single_early_competitor() {
        let mut f = FeedState::new(SortingRule::ReverseChrono, 0.5).unwrap();
        f.add_competitor_post(0.7, 0, 0.5).unwrap();
        assert!((reward_time_at_top(&f, 5.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn priority_two_section_trace() {
        let mut f = FeedState::new(SortingRule::PriorityQueue { dwell: 1.0 }, 0.5).unwrap();
        f.add_competitor_post(0.5, 0, 0.9).unwrap();
        f.add_agent_post(0.6).unwrap();
        assert_eq!(f.rank(0.6), 1);
        assert_eq!(f.rank(1.2), 1);
        assert_eq!(f.rank(1.5), 0);
        // Both in the bulk; the agent's post is the newer one.
        assert_eq!(f.rank(2.0), 0);
    }

    #[test]
    fn priority_bulk_agent_sits_under_fresh_posts() {
        let mut f = FeedState::new(SortingRule::PriorityQueue { dwell: 1.0 }, 0.5).unwrap();
        f.add_competitor_post(1.5, 0, 0.1).unwrap();
        // The agent's initial post is in the bulk from t = 1, so even a
        // lower-priority fresh post sits above it.
        assert_eq!(f.rank(1.6), 1);
        let mut g = FeedState::new(SortingRule::PriorityQueue { dwell: 1.0 }, 0.5).unwrap();
        g.add_competitor_post(0.2, 0, 0.1).unwrap();
        // While both are fresh, priority wins.
        assert_eq!(g.rank(0.5), 0);
        // At t = 1 the agent's post drops to the bulk under the fresh one.
        assert_eq!(g.rank(1.0), 1);
        // Both in the bulk; the competitor's post is newer.
        assert_eq!(g.rank(1.3), 1);
    }

    #[test]
    fn agent_post_takes_top_unless_outranked() {
        let mut f = FeedState::new(SortingRule::PriorityQueue { dwell: 2.0 }, 0.5).unwrap();
        f.add_competitor_post(0.1, 0, 0.4).unwrap();
        f.add_competitor_post(0.2, 1, 0.8).unwrap();
        f.add_agent_post(0.3).unwrap();
        assert_eq!(f.rank(0.3), 1);
        let mut c = FeedState::new(SortingRule::ReverseChrono, 0.5).unwrap();
        c.add_competitor_post(0.1, 0, 0.4).unwrap();
        c.add_agent_post(0.3).unwrap();
        assert_eq!(c.rank(0.3), 0);
    }

    #[test]
    fn rank_pieces_include_expiry() {
        let mut f = FeedState::new(SortingRule::PriorityQueue { dwell: 1.0 }, 0.5).unwrap();
        f.add_competitor_post(0.5, 0, 0.9).unwrap();
        f.add_agent_post(0.6).unwrap();
        assert_eq!(f.rank_pieces(0.7), vec![(0.7, 1), (1.5, 0)]);
    }

    #[test]
    fn priority_from_counts() {
        let p = Priorities::from_counts(&[0, 1, 3]);
        assert_eq!(p.competitors, vec![1.0, (0.5 - 0.25) / 0.75, 0.0]);
        assert_eq!(p.agent, 1.0 / 3.0);
        assert_eq!(Priorities::from_counts(&[4, 4]).competitors, vec![1.0, 1.0]);
    }

    #[test]
    fn replay_log_parsing_is_strict() {
        let ok = "{\"t\":0.5,\"src\":\"a\"}\n{\"t\":1.0,\"src\":\"b\"}\n";
        assert_eq!(ReplayLog::read_records(ok.as_bytes()).unwrap().len(), 2);
        let typo = "{\"t\":0.5,\"src\":\"a\"}\n{\"time\":1.0,\"src\":\"b\"}\n";
        assert!(matches!(
            ReplayLog::read_records(typo.as_bytes()),
            Err(Error::Ingestion { line: 2, .. })
        ));
        let extra = "{\"t\":0.5,\"src\":\"a\",\"x\":1}\n";
        assert!(ReplayLog::read_records(extra.as_bytes()).is_err());
        assert!(ReplayLog::read_manifest("{\"train\":[0,1],\"test\":[1,2]}").is_ok());
        assert!(ReplayLog::read_manifest("{\"train\":[0,1],\"tst\":[1,2]}").is_err());
        let unsorted = vec![
            Record {
                t: 1.0,
                src: "a".into(),
            },
            Record {
                t: 0.5,
                src: "a".into(),
            },
        ];
        assert!(matches!(
            ReplayLog::new(unsorted, SplitManifest::empty()),
            Err(Error::Ingestion { line: 2, .. })
        ));
    }

    #[test]
    fn windows_and_counts() {
        let records = [(0.5, "b"), (1.0, "a"), (1.5, "b"), (2.5, "a")]
            .iter()
            .map(|&(t, s)| Record { t, src: s.into() })
            .collect();
        let log = ReplayLog::new(
            records,
            SplitManifest {
                train: [0.0, 2.0],
                test: [2.0, 3.0],
            },
        )
        .unwrap();
        assert_eq!(log.sources(), ["a", "b"]);
        assert_eq!(log.train_counts(), vec![1, 2]);
        assert_eq!(
            log.test_window(),
            Window {
                events: vec![(0.5, 0)],
                length: 1.0
            }
        );
    }

    #[test]
    fn synthetic_rate_zero_is_empty() {
        assert!(
            synth_competitors(&[CompetitorSpec::Poisson { rate: 0.0 }], 10.0, 1)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn synthetic_poisson_counts_concentrate() {
        let (mu, t) = (3.0, 20.0);
        for seed in 0..100 {
            let n = synth_competitors(&[CompetitorSpec::Poisson { rate: mu }], t, seed)
                .unwrap()
                .len() as f64;
            assert!(
                (n - mu * t).abs() < 4.0 * (mu * t).sqrt(),
                "seed {seed}: {n}"
            );
        }
    }

    #[test]
    fn synthetic_sources_superpose() {
        let a = CompetitorSpec::Poisson { rate: 1.0 };
        let b = CompetitorSpec::Poisson { rate: 2.0 };
        let both = synth_competitors(&[a.clone(), b.clone()], 10.0, 5).unwrap();
        let only_a = synth_competitors(&[a], 10.0, 5).unwrap();
        let count = |name: &str| both.iter().filter(|r| r.src == name).count();
        assert_eq!(count("c0"), only_a.len());
        assert_eq!(count("c0") + count("c1"), both.len());
        assert!(both.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn bursts_are_deterministic() {
        let spec = [CompetitorSpec::Bursts {
            rate: 0.5,
            mean_size: 4.0,
            spacing: 0.05,
        }];
        let a = synth_competitors(&spec, 50.0, 9).unwrap();
        assert_eq!(a, synth_competitors(&spec, 50.0, 9).unwrap());
        assert!(a.len() > 25);
    }

    #[test]
    fn test_length_targets_expected_count() {
        assert_eq!(test_length_for(400, 100.0, 200.0), Some(50.0));
        assert_eq!(test_length_for(0, 100.0, 200.0), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn trace() -> impl Strategy<Value = Vec<(f64, Option<usize>)>> {
            proptest::collection::vec((0.0f64..10.0, proptest::option::of(0usize..3)), 0..25)
                .prop_map(|mut v| {
                    v.sort_by(|a, b| a.0.total_cmp(&b.0));
                    v
                })
        }

        fn build(
            rule: SortingRule,
            prios: &[f64],
            agent: f64,
            events: &[(f64, Option<usize>)],
        ) -> FeedState {
            let mut f = FeedState::new(rule, agent).unwrap();
            for &(t, src) in events {
                match src {
                    Some(s) => f.add_competitor_post(t, s, prios[s]).unwrap(),
                    None => f.add_agent_post(t).unwrap(),
                }
            }
            f
        }

        proptest! {
            #[test]
            fn probes_do_not_change_integrals(events in trace(), probes in proptest::collection::vec(0.0f64..10.0, 0..10), dwell in 0.0f64..3.0) {
                for rule in [SortingRule::ReverseChrono, SortingRule::PriorityQueue { dwell }] {
                    let f = build(rule, &[0.2, 0.5, 0.9], 0.5, &events);
                    let a = f.rank_integral(10.0);
                    let b = f.rank_integral_with_probes(10.0, &probes);
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                    let a = f.time_at_top(10.0);
                    let b = f.time_at_top_with_probes(10.0, &probes);
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }

            #[test]
            fn degenerate_priority_queue_is_chronological(events in trace(), probes in proptest::collection::vec(0.0f64..10.0, 1..20)) {
                let flat = [0.5; 3];
                let pq = build(SortingRule::PriorityQueue { dwell: 0.0 }, &flat, 0.5, &events);
                let rc = build(SortingRule::ReverseChrono, &flat, 0.5, &events);
                for t in probes.iter().copied().chain(events.iter().map(|e| e.0)) {
                    prop_assert_eq!(pq.rank(t), rc.rank(t));
                }
            }

            #[test]
            fn chrono_rank_resets_after_agent_post(events in trace()) {
                let f = build(SortingRule::ReverseChrono, &[0.5; 3], 0.5, &events);
                for (i, &(t, src)) in events.iter().enumerate() {
                    let later_same_time = events[i + 1..].iter().any(|e| e.0 == t);
                    if src.is_none() && !later_same_time {
                        prop_assert_eq!(f.rank(t), 0);
                    }
                }
            }

            #[test]
            fn integrals_are_bounded(events in trace(), dwell in 0.0f64..3.0) {
                let f = build(SortingRule::PriorityQueue { dwell }, &[0.2, 0.5, 0.9], 0.5, &events);
                let top = f.time_at_top(10.0);
                prop_assert!((0.0..=10.0 + 1e-12).contains(&top));
                prop_assert!(f.rank_integral(10.0) >= 0.0);
                prop_assert!(f.rank_integral(10.0) <= events.len() as f64 * 10.0);
            }
        }
    }
}
