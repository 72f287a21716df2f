use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{info, warn};
use pointrl_core::baselines::{
    calibrate_budget, calibrate_poisson, BudgetCalibration, Memorize, RedQueen, UniformPoisson,
};
use pointrl_core::broadcast::{
    synthetic_log, test_length_for, BroadcastEnv, Record, ReplayLog, SortingRule, SplitManifest,
    WindowMode,
};
use pointrl_core::env::{rollouts, AgentFactory, Environment, NeuralPolicy, Rollout};
use pointrl_core::gradcheck::{run_grad_check, GradCheckReport};
use pointrl_core::memory::{parse_items, MemoryConfig, MemoryEnv};
use pointrl_core::reinforce::{train_with, TrainingStats, EVAL_ITERATION};
use pointrl_core::samplecheck::{check_scenario, standard_scenarios, ScenarioReport};
use pointrl_core::stats::{mean, Summary};
use pointrl_core::toy::CountingEnv;
use pointrl_core::{InitConfig, PolicyParams, PolicyShape};
use serde::{Deserialize, Serialize};

use crate::config::{
    BroadcastEnvConfig, EnvironmentConfig, MemoryEnvConfig, PolicyKind, RunConfig, Sorting,
};
use crate::error::{CliError, CliResult};
use crate::output::Outputs;

pub enum BuiltEnv {
    Memory(MemoryEnv),
    Broadcast(BroadcastEnv),
    Counting(CountingEnv),
}

macro_rules! dispatch {
    ($built:expr, $env:ident => $body:expr) => {
        match $built {
            BuiltEnv::Memory($env) => $body,
            BuiltEnv::Broadcast($env) => $body,
            BuiltEnv::Counting($env) => $body,
        }
    };
}

fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

fn with_path(path: &Path, e: pointrl_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn memory_config(cfg: &MemoryEnvConfig) -> CliResult<MemoryConfig> {
    let mut config = match &cfg.items_file {
        Some(path) => {
            let items = parse_items(open(path)?).map_err(|e| with_path(path, e))?;
            MemoryConfig {
                alpha: 0.0,
                beta: 0.0,
                items,
                horizon: 0.0,
                test_delay: 0.0,
            }
        }
        None => {
            let [lo, hi] = cfg.n0_range;
            if !(lo > 0.0 && hi >= lo) {
                return Err(CliError::Config(format!(
                    "n0_range must satisfy 0 < lo <= hi, got {:?}",
                    cfg.n0_range
                )));
            }
            MemoryConfig::synthetic(cfg.items, (lo, hi), cfg.student_seed)
        }
    };
    config.alpha = cfg.alpha;
    config.beta = cfg.beta;
    config.horizon = cfg.horizon;
    config.test_delay = cfg.test_delay;
    config.validate()?;
    Ok(config)
}

pub fn replay_log(cfg: &BroadcastEnvConfig) -> CliResult<ReplayLog> {
    match (&cfg.log, &cfg.manifest) {
        (Some(log), Some(manifest)) => {
            let records = ReplayLog::read_records(open(log)?).map_err(|e| with_path(log, e))?;
            let split = ReplayLog::read_manifest(&read_to_string(manifest)?)
                .map_err(|e| with_path(manifest, e))?;
            ReplayLog::new(records, split).map_err(|e| with_path(log, e))
        }
        (None, None) => {
            if cfg.competitors.is_empty() {
                return Err(CliError::Config(
                    "broadcast needs either log + manifest or synthetic competitors".into(),
                ));
            }
            let probe = synthetic_log(&cfg.competitors, cfg.train_length, 1.0, cfg.synthetic_seed)?;
            let count = probe.train_counts().iter().sum();
            let test =
                test_length_for(count, cfg.train_length, cfg.target_events).ok_or_else(|| {
                    CliError::Data("synthetic competitors produced no training posts".into())
                })?;
            Ok(synthetic_log(
                &cfg.competitors,
                cfg.train_length,
                test,
                cfg.synthetic_seed,
            )?)
        }
        _ => Err(CliError::Config(
            "broadcast log and manifest must be given together".into(),
        )),
    }
}

pub fn sorting_rule(cfg: &BroadcastEnvConfig, horizon: f64) -> CliResult<SortingRule> {
    match cfg.sorting {
        Sorting::ReverseChrono => Ok(SortingRule::ReverseChrono),
        Sorting::PriorityQueue => {
            if !(cfg.dwell_fraction >= 0.0 && cfg.dwell_fraction.is_finite()) {
                return Err(CliError::Config(format!(
                    "dwell_fraction must be >= 0, got {}",
                    cfg.dwell_fraction
                )));
            }
            Ok(SortingRule::PriorityQueue {
                dwell: cfg.dwell_fraction * horizon,
            })
        }
    }
}

/// Builds the environment; broadcast feeds replay training windows.
pub fn build_environment(cfg: &EnvironmentConfig) -> CliResult<BuiltEnv> {
    Ok(match cfg {
        EnvironmentConfig::Memory(m) => BuiltEnv::Memory(MemoryEnv::new(memory_config(m)?)?),
        EnvironmentConfig::Broadcast(b) => {
            let log = replay_log(b)?;
            let rule = sorting_rule(b, log.split().test_length())?;
            BuiltEnv::Broadcast(BroadcastEnv::new(
                log,
                rule,
                b.objective,
                WindowMode::Train,
            )?)
        }
        EnvironmentConfig::Counting(c) => {
            BuiltEnv::Counting(CountingEnv::new(c.horizon, c.reward)?)
        }
    })
}

impl BuiltEnv {
    /// The same environment in evaluation mode.
    pub fn for_evaluation(&self) -> BuiltEnv {
        match self {
            BuiltEnv::Memory(e) => BuiltEnv::Memory(e.clone()),
            BuiltEnv::Broadcast(e) => BuiltEnv::Broadcast(e.with_mode(WindowMode::Test)),
            BuiltEnv::Counting(e) => BuiltEnv::Counting(*e),
        }
    }

    pub fn horizon(&self) -> f64 {
        dispatch!(self, e => e.horizon())
    }

    pub fn action_marks(&self) -> Option<usize> {
        match self {
            BuiltEnv::Memory(e) => Some(e.config().item_count()),
            _ => None,
        }
    }

    pub fn policy_shape(&self, input_dim: usize, hidden_dim: usize) -> PolicyShape {
        let shape = PolicyShape::new(input_dim, hidden_dim);
        match self {
            BuiltEnv::Memory(e) => shape
                .with_action_marks(e.config().item_count())
                .with_feedback_marks(e.config().feedback_vocabulary()),
            BuiltEnv::Broadcast(e) => shape.with_feedback_marks(e.feedback_vocabulary()),
            BuiltEnv::Counting(_) => shape,
        }
    }
}

pub fn initial_params(config: &RunConfig, env: &BuiltEnv) -> CliResult<PolicyParams> {
    let p = &config.policy;
    let shape = env.policy_shape(p.input_dim, p.hidden_dim);
    match &p.checkpoint {
        Some(path) => {
            let params = PolicyParams::load(path).map_err(|e| with_path(path, e))?;
            if params.shape() != &shape {
                return Err(CliError::Config(format!(
                    "checkpoint {} has shape {:?}, the environment needs {:?}",
                    path.display(),
                    params.shape(),
                    shape
                )));
            }
            Ok(params)
        }
        None => {
            let init = InitConfig {
                seed: p.init_seed.unwrap_or(config.seed),
                scale: p.init_scale,
                base_rate: p.base_rate.unwrap_or(1.0),
            };
            Ok(PolicyParams::init(shape, p.freeze_w_t, &init)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_mean_reward: Option<f64>,
    pub final_mean_actions: Option<f64>,
    /// Means over the last tenth of the iterations.
    pub tail_mean_reward: Option<f64>,
    pub tail_mean_actions: Option<f64>,
    pub w_t: f64,
    pub intensity_bias: f64,
    /// `exp(b_λ)`: the intensity of a policy whose hidden state is zero.
    pub base_intensity: f64,
    pub checkpoint: String,
}

pub fn train(config: &RunConfig, out: &mut Outputs) -> CliResult<TrainSummary> {
    let env = build_environment(config.environment.as_ref().expect("resolved"))?;
    let params = initial_params(config, &env)?;
    let tc = config.train_config();
    let every = config.train.checkpoint_every.filter(|&k| k > 0);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let dir = out.dir().to_path_buf();
    let result = dispatch!(&env, e => train_with(e, params, &tc, |record, params| {
        if let Some(k) = every {
            if (record.iteration + 1) % k == 0 {
                let path = dir.join(format!("checkpoint-{}.json", record.iteration + 1));
                checkpoints.push(path.clone());
                params.save(&path)?;
            }
        }
        if record.iteration % 100 == 0 {
            info!("iteration {}: reward {:.6} actions {:.3}", record.iteration, record.mean_reward, record.mean_actions);
        }
        Ok(())
    }));
    for path in checkpoints {
        out.track(path);
    }
    let (params, stats) = result?;
    let mut csv = Vec::new();
    stats.write_csv(&mut csv)?;
    out.write("stats.csv", csv)?;
    out.write("policy.json", params.to_checkpoint_json()?)?;
    let summary = summarize_training(&stats, &params);
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn summarize_training(stats: &TrainingStats, params: &PolicyParams) -> TrainSummary {
    let n = stats.records.len();
    let tail = &stats.records[n - (n / 10).max(1).min(n)..];
    let avg = |f: fn(&pointrl_core::reinforce::IterationRecord) -> f64| {
        (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
    };
    TrainSummary {
        iterations: n,
        final_mean_reward: stats.records.last().map(|r| r.mean_reward),
        final_mean_actions: stats.records.last().map(|r| r.mean_actions),
        tail_mean_reward: avg(|r| r.mean_reward),
        tail_mean_actions: avg(|r| r.mean_actions),
        w_t: params.w_t(),
        intensity_bias: params.b_lambda(),
        base_intensity: params.b_lambda().exp(),
        checkpoint: "policy.json".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: PolicyKind,
    pub episodes: usize,
    /// Rate or `κ` of a baseline scheduler.
    pub scale: Option<f64>,
    pub calibration: Option<BudgetCalibration>,
    pub reward: Summary,
    pub actions: Summary,
    /// Rewards divided by the mean reward of a uniform scheduler with the
    /// same mean action count.
    pub normalized: Option<Summary>,
    pub reference_rate: Option<f64>,
    /// Mean initial forgetting rate of the reviewed items.
    pub mean_item_difficulty: Option<f64>,
}

struct Played {
    runs: Vec<Rollout>,
}

impl Played {
    fn rewards(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.reward).collect()
    }

    fn actions(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.action_count() as f64).collect()
    }
}

fn play<E: Environment, F: AgentFactory>(
    env: &E,
    factory: &F,
    episodes: usize,
    seed: u64,
) -> CliResult<Played> {
    if episodes == 0 {
        return Err(CliError::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    Ok(Played {
        runs: rollouts(env, factory, seed, EVAL_ITERATION, episodes)?,
    })
}

/// Rate, or a calibrated scale constant, for a baseline.
fn baseline_scale<C>(
    config: &RunConfig,
    budget: Option<f64>,
    calibrate: C,
) -> CliResult<(f64, Option<BudgetCalibration>)>
where
    C: FnOnce(f64) -> CliResult<BudgetCalibration>,
{
    match (config.eval.scale, budget) {
        (Some(s), _) => Ok((s, None)),
        (None, Some(b)) => {
            let cal = calibrate(b)?;
            Ok((cal.scale, Some(cal)))
        }
        (None, None) => Err(CliError::Config(
            "a baseline needs eval.scale or eval.budget".into(),
        )),
    }
}

pub fn calibrate_baseline(
    env: &BuiltEnv,
    kind: PolicyKind,
    budget: f64,
    episodes: usize,
    seed: u64,
) -> CliResult<BudgetCalibration> {
    match (kind, env) {
        (PolicyKind::Uniform, _) => Ok(calibrate_poisson(budget, env.horizon())?),
        (PolicyKind::Memorize, BuiltEnv::Memory(e)) => {
            let config = e.config().clone();
            Ok(calibrate_budget(
                e,
                |k| Memorize::new(k, config.clone()),
                budget,
                1.0,
                episodes,
                seed,
            )?)
        }
        (PolicyKind::Redqueen, BuiltEnv::Broadcast(e)) => {
            let (rule, prio) = (e.rule(), e.priorities().clone());
            let initial = budget / env.horizon() / 10.0;
            Ok(calibrate_budget(
                e,
                |k| RedQueen::new(k, rule, prio.clone()),
                budget,
                initial,
                episodes,
                seed,
            )?)
        }
        (PolicyKind::Trained, _) => {
            Err(CliError::Config("only baselines can be calibrated".into()))
        }
        (kind, _) => Err(CliError::Config(format!(
            "{kind:?} does not apply to this environment"
        ))),
    }
}

fn play_kind(
    config: &RunConfig,
    env: &BuiltEnv,
    budget: Option<f64>,
) -> CliResult<(Played, Option<f64>, Option<BudgetCalibration>)> {
    let (n, seed) = (config.eval.episodes, config.seed);
    let cal_episodes = config.eval.calibration_episodes;
    let calibrate = |kind| move |b| calibrate_baseline(env, kind, b, cal_episodes, seed);
    match (config.eval.policy, env) {
        (PolicyKind::Trained, _) => {
            if config.policy.checkpoint.is_none() {
                return Err(CliError::Config(
                    "evaluating a trained policy needs policy.checkpoint".into(),
                ));
            }
            let params = initial_params(config, env)?;
            Ok((
                dispatch!(env, e => play(e, &NeuralPolicy(&params), n, seed))?,
                None,
                None,
            ))
        }
        (PolicyKind::Uniform, _) => {
            let (rate, cal) = baseline_scale(config, budget, calibrate(PolicyKind::Uniform))?;
            let agent = UniformPoisson::new(rate, env.action_marks())?;
            Ok((
                dispatch!(env, e => play(e, &agent, n, seed))?,
                Some(rate),
                cal,
            ))
        }
        (PolicyKind::Memorize, BuiltEnv::Memory(e)) => {
            let (kappa, cal) = baseline_scale(config, budget, calibrate(PolicyKind::Memorize))?;
            Ok((
                play(e, &Memorize::new(kappa, e.config().clone())?, n, seed)?,
                Some(kappa),
                cal,
            ))
        }
        (PolicyKind::Redqueen, BuiltEnv::Broadcast(e)) => {
            let (kappa, cal) = baseline_scale(config, budget, calibrate(PolicyKind::Redqueen))?;
            Ok((
                play(
                    e,
                    &RedQueen::new(kappa, e.rule(), e.priorities().clone())?,
                    n,
                    seed,
                )?,
                Some(kappa),
                cal,
            ))
        }
        (kind, _) => Err(CliError::Config(format!(
            "{kind:?} does not apply to this environment"
        ))),
    }
}

pub fn eval(config: &RunConfig, out: &mut Outputs) -> CliResult<EvalReport> {
    let env = build_environment(config.environment.as_ref().expect("resolved"))?.for_evaluation();
    let (played, scale, calibration) = play_kind(config, &env, config.eval.budget)?;
    let rewards = played.rewards();
    let actions = played.actions();
    let (normalized, reference_rate) = if config.eval.normalize {
        let (reference, rate) = if config.eval.policy == PolicyKind::Uniform {
            (rewards.clone(), scale.expect("uniform has a rate"))
        } else {
            let budget = config.eval.budget.unwrap_or_else(|| mean(&actions));
            let rate = calibrate_poisson(budget, env.horizon())?.scale;
            let agent = UniformPoisson::new(rate, env.action_marks())?;
            (
                dispatch!(&env, e => play(e, &agent, config.eval.episodes, config.seed))?.rewards(),
                rate,
            )
        };
        let norm = mean(&reference);
        if norm == 0.0 || !norm.is_finite() {
            return Err(CliError::Numeric(format!(
                "uniform reference reward {norm} cannot normalize"
            )));
        }
        let scaled: Vec<f64> = rewards.iter().map(|r| r / norm).collect();
        (Summary::of(&scaled), Some(rate))
    } else {
        (None, None)
    };
    let mean_item_difficulty = match &env {
        BuiltEnv::Memory(e) => {
            let n0: Vec<f64> = played
                .runs
                .iter()
                .flat_map(|r| {
                    r.history
                        .actions()
                        .filter_map(|a| a.mark)
                        .collect::<Vec<_>>()
                })
                .map(|m| e.config().items[m].n0)
                .collect();
            (!n0.is_empty()).then(|| mean(&n0))
        }
        _ => None,
    };
    let mut csv = String::from("episode,reward,actions\n");
    for (i, (r, a)) in rewards.iter().zip(&actions).enumerate() {
        csv.push_str(&format!("{i},{r},{a}\n"));
    }
    out.write("episodes.csv", csv)?;
    let report = EvalReport {
        policy: config.eval.policy,
        episodes: rewards.len(),
        scale,
        calibration,
        reward: Summary::of(&rewards).expect("non-empty"),
        actions: Summary::of(&actions).expect("non-empty"),
        normalized,
        reference_rate,
        mean_item_difficulty,
    };
    out.write_json("summary.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCheckReport {
    pub scenarios: Vec<ScenarioReport>,
    pub worst: f64,
    pub threshold: f64,
}

pub fn sample_check(config: &RunConfig, out: &mut Outputs) -> CliResult<SampleCheckReport> {
    let s = &config.sample_check;
    let scenarios = standard_scenarios()
        .iter()
        .map(|sc| check_scenario(sc, s.samples, config.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let worst = scenarios
        .iter()
        .map(ScenarioReport::worst)
        .fold(0.0, f64::max);
    for r in &scenarios {
        println!(
            "{}: KS {:.5} (thinning {:.5}, two-sample {:.5})",
            r.name, r.ks_analytic, r.ks_thinning_analytic, r.ks_sampler_thinning
        );
    }
    let report = SampleCheckReport {
        scenarios,
        worst,
        threshold: s.threshold,
    };
    if !(worst < s.threshold) {
        return Err(CliError::Numeric(format!(
            "KS statistic {worst:.5} is not below {}",
            s.threshold
        )));
    }
    out.write_json("summary.json", &report)?;
    Ok(report)
}

pub fn grad_check(config: &RunConfig, out: &mut Outputs) -> CliResult<GradCheckReport> {
    let g = &config.grad_check;
    let report = run_grad_check(config.seed, g.cases, g.dim, g.max_events, g.step)?;
    println!(
        "max relative error {:.3e} over {} cases (case {}, {} of {})",
        report.max_rel_error,
        report.cases,
        report.worst_case,
        report.worst_objective,
        report.worst_tensor
    );
    if !(report.max_rel_error <= g.threshold) {
        return Err(CliError::Numeric(format!(
            "gradient error {:.3e} exceeds {:.1e}",
            report.max_rel_error, g.threshold
        )));
    }
    out.write_json("summary.json", &report)?;
    Ok(report)
}

pub fn calibrate(config: &RunConfig, out: &mut Outputs) -> CliResult<BudgetCalibration> {
    let env = build_environment(config.environment.as_ref().expect("resolved"))?.for_evaluation();
    let c = &config.calibrate;
    let budget = c
        .budget
        .ok_or_else(|| CliError::Config("calibrate needs calibrate.budget".into()))?;
    let cal = calibrate_baseline(&env, c.policy, budget, c.episodes, config.seed)?;
    println!(
        "{:?}: scale {} gives {:.3} actions (target {budget})",
        c.policy, cal.scale, cal.achieved
    );
    out.write_json("calibration.json", &cal)?;
    Ok(cal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub records: usize,
    pub duplicates: usize,
    pub sources: usize,
    pub train_events: usize,
    pub test_length: f64,
    pub test_events: usize,
}

/// Reads raw posts, tolerating any order; reports every malformed line.
fn read_raw(path: &Path) -> CliResult<Vec<Record>> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) if r.t.is_finite() => records.push(r),
            Ok(_) => problems.push(format!("line {}: non-finite time", i + 1)),
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        let shown = problems
            .iter()
            .take(10)
            .cloned()
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::Data(format!(
            "{}: {} bad records: {shown}",
            path.display(),
            problems.len()
        )));
    }
    Ok(records)
}

pub fn replay_convert(config: &RunConfig, out: &mut Outputs) -> CliResult<ConversionReport> {
    let rc = config.replay_convert.as_ref().expect("resolved");
    let mut records = read_raw(&rc.input)?;
    records.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.src.cmp(&b.src)));
    let duplicates = records.windows(2).filter(|w| w[0] == w[1]).count();
    let mut buf = Vec::new();
    if records.is_empty() {
        warn!(
            "{} holds no records; writing an empty log",
            rc.input.display()
        );
        out.write("log.jsonl", buf)?;
        out.write_json("manifest.json", &SplitManifest::empty())?;
        let report = ConversionReport {
            records: 0,
            duplicates: 0,
            sources: 0,
            train_events: 0,
            test_length: 0.0,
            test_events: 0,
        };
        out.write_json("conversion.json", &report)?;
        return Ok(report);
    }
    if duplicates as f64 > rc.max_duplicate_share * records.len() as f64 {
        let first: Vec<String> = records
            .windows(2)
            .filter(|w| w[0] == w[1])
            .take(5)
            .map(|w| format!("({}, {})", w[0].t, w[0].src))
            .collect();
        return Err(CliError::Data(format!(
            "{} of {} records are exact duplicates (limit {:.0}%), e.g. {}",
            duplicates,
            records.len(),
            100.0 * rc.max_duplicate_share,
            first.join(", ")
        )));
    }
    let [a, b] = rc.train;
    if !(a < b) {
        return Err(CliError::Config(format!(
            "training window must satisfy start < end, got {:?}",
            rc.train
        )));
    }
    let train_events = records.iter().filter(|r| r.t >= a && r.t < b).count();
    let test_length = test_length_for(train_events, b - a, rc.target_events).ok_or_else(|| {
        CliError::Data("the training window holds no posts, so no rate can be estimated".into())
    })?;
    let split = SplitManifest {
        train: [a, b],
        test: [b, b + test_length],
    };
    let log = ReplayLog::new(records, split)?;
    ReplayLog::write_records(log.records(), &mut buf)?;
    out.write("log.jsonl", buf)?;
    out.write_json("manifest.json", &split)?;
    let report = ConversionReport {
        records: log.records().len(),
        duplicates,
        sources: log.sources().len(),
        train_events,
        test_length,
        test_events: log.test_window().events.len(),
    };
    out.write_json("conversion.json", &report)?;
    Ok(report)
}
