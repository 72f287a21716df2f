//! Run configuration: a strict TOML schema with per-environment defaults.
//!
//! Every run stores its fully resolved configuration in `run-manifest.json`;
//! feeding that file back to the runner repeats the run exactly.

use std::path::{Path, PathBuf};

use pointrl_core::broadcast::{CompetitorSpec, Objective};
use pointrl_core::toy::CountReward;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Eval,
    SampleCheck,
    GradCheck,
    Calibrate,
    ReplayConvert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Rollout worker threads; 0 uses one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub environment: Option<EnvironmentConfig>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sample_check: SampleCheckSection,
    #[serde(default)]
    pub grad_check: GradCheckSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub replay_convert: Option<ReplayConvertSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnvironmentConfig {
    Memory(MemoryEnvConfig),
    Broadcast(BroadcastEnvConfig),
    Counting(CountingEnvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryEnvConfig {
    /// Number of synthetic items; ignored when `items_file` is set.
    #[serde(default = "defaults::items")]
    pub items: usize,
    #[serde(default = "defaults::n0_range")]
    pub n0_range: [f64; 2],
    #[serde(default = "defaults::student_seed")]
    pub student_seed: u64,
    #[serde(default)]
    pub items_file: Option<PathBuf>,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::memory_horizon")]
    pub horizon: f64,
    #[serde(default = "defaults::test_delay")]
    pub test_delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sorting {
    ReverseChrono,
    PriorityQueue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BroadcastEnvConfig {
    /// Replay log (JSONL); synthetic competitors are used when absent.
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub competitors: Vec<CompetitorSpec>,
    #[serde(default = "defaults::train_length")]
    pub train_length: f64,
    #[serde(default = "defaults::target_events")]
    pub target_events: f64,
    #[serde(default = "defaults::synthetic_seed")]
    pub synthetic_seed: u64,
    #[serde(default = "defaults::sorting")]
    pub sorting: Sorting,
    /// Dwell time of the priority section as a fraction of the horizon.
    #[serde(default = "defaults::dwell_fraction")]
    pub dwell_fraction: f64,
    #[serde(default = "defaults::objective")]
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingEnvConfig {
    pub horizon: f64,
    pub reward: CountReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "defaults::dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub freeze_w_t: bool,
    #[serde(default = "defaults::init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub base_rate: Option<f64>,
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Start from (train) or evaluate (eval) a saved checkpoint.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            input_dim: defaults::dim(),
            hidden_dim: defaults::dim(),
            freeze_w_t: false,
            init_scale: defaults::init_scale(),
            base_rate: None,
            init_seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    pub episodes: Option<usize>,
    pub lr_base: Option<f64>,
    pub lr_decay: Option<f64>,
    pub q_l: Option<f64>,
    pub q_m: Option<f64>,
    pub use_mean_baseline: Option<bool>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    /// Write `checkpoint-<i>.json` every this many iterations.
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Trained,
    Uniform,
    Memorize,
    Redqueen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "defaults::eval_episodes")]
    pub episodes: usize,
    #[serde(default = "defaults::policy_kind")]
    pub policy: PolicyKind,
    /// Rate (uniform) or `κ` (Memorize, RedQueen); calibrated to `budget`
    /// when absent.
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub budget: Option<f64>,
    /// Also evaluate a uniform scheduler at the same budget and report
    /// rewards relative to its mean.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "defaults::calibration_episodes")]
    pub calibration_episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: defaults::eval_episodes(),
            policy: defaults::policy_kind(),
            scale: None,
            budget: None,
            normalize: false,
            calibration_episodes: defaults::calibration_episodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCheckSection {
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default = "defaults::ks_threshold")]
    pub threshold: f64,
}

impl Default for SampleCheckSection {
    fn default() -> Self {
        Self {
            samples: defaults::samples(),
            threshold: defaults::ks_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    #[serde(default = "defaults::cases")]
    pub cases: usize,
    #[serde(default = "defaults::grad_dim")]
    pub dim: usize,
    #[serde(default = "defaults::max_events")]
    pub max_events: usize,
    #[serde(default = "defaults::fd_step")]
    pub step: f64,
    #[serde(default = "defaults::grad_threshold")]
    pub threshold: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            cases: defaults::cases(),
            dim: defaults::grad_dim(),
            max_events: defaults::max_events(),
            step: defaults::fd_step(),
            threshold: defaults::grad_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    #[serde(default = "defaults::baseline_kind")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default = "defaults::calibration_episodes")]
    pub episodes: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            policy: defaults::baseline_kind(),
            budget: None,
            episodes: defaults::calibration_episodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConvertSection {
    /// Raw posts, one JSON object `{"t": .., "src": ..}` per line, any order.
    pub input: PathBuf,
    /// Training window; the test window starts where it ends.
    pub train: [f64; 2],
    #[serde(default = "defaults::target_events")]
    pub target_events: f64,
    /// Largest tolerated share of exact duplicate records.
    #[serde(default = "defaults::max_duplicate_share")]
    pub max_duplicate_share: f64,
}

mod defaults {
    use super::{Objective, PolicyKind, Sorting};

    pub fn items() -> usize {
        10
    }
    pub fn n0_range() -> [f64; 2] {
        [0.01, 1.0]
    }
    pub fn student_seed() -> u64 {
        7
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn beta() -> f64 {
        0.2
    }
    pub fn memory_horizon() -> f64 {
        14.0
    }
    pub fn test_delay() -> f64 {
        1.0
    }
    pub fn train_length() -> f64 {
        2000.0
    }
    pub fn target_events() -> f64 {
        200.0
    }
    pub fn synthetic_seed() -> u64 {
        1
    }
    pub fn sorting() -> Sorting {
        Sorting::PriorityQueue
    }
    pub fn dwell_fraction() -> f64 {
        0.1
    }
    pub fn objective() -> Objective {
        Objective::AverageRank
    }
    pub fn dim() -> usize {
        8
    }
    pub fn init_scale() -> f64 {
        0.1
    }
    pub fn eval_episodes() -> usize {
        1000
    }
    pub fn policy_kind() -> PolicyKind {
        PolicyKind::Trained
    }
    pub fn baseline_kind() -> PolicyKind {
        PolicyKind::Uniform
    }
    pub fn calibration_episodes() -> usize {
        200
    }
    pub fn samples() -> usize {
        100_000
    }
    pub fn ks_threshold() -> f64 {
        0.01
    }
    pub fn cases() -> usize {
        50
    }
    pub fn grad_dim() -> usize {
        3
    }
    pub fn max_events() -> usize {
        10
    }
    pub fn fd_step() -> f64 {
        1e-5
    }
    pub fn grad_threshold() -> f64 {
        1e-4
    }
    pub fn max_duplicate_share() -> f64 {
        0.1
    }
}

/// Training hyperparameters per application.
struct TableRow {
    iterations: usize,
    episodes: usize,
    lr: (f64, f64),
    q_l: f64,
    q_m: f64,
    base_rate: f64,
}

fn table_row(env: Option<&EnvironmentConfig>) -> TableRow {
    match env {
        Some(EnvironmentConfig::Memory(_)) | None => TableRow {
            iterations: 5000,
            episodes: 32,
            lr: (0.02, 2e-3),
            q_l: 1e-2,
            q_m: 5e-3,
            base_rate: 1.0,
        },
        Some(EnvironmentConfig::Broadcast(b)) => TableRow {
            iterations: 1000,
            episodes: 16,
            lr: (1e-2, 1e-4),
            q_l: match b.objective {
                Objective::TimeAtTop => 0.33,
                Objective::AverageRank => 100.0,
            },
            q_m: 0.0,
            base_rate: 0.2,
        },
        Some(EnvironmentConfig::Counting(_)) => TableRow {
            iterations: 2000,
            episodes: 32,
            lr: (0.05, 1e-3),
            q_l: 0.0,
            q_m: 0.0,
            base_rate: 1.0,
        },
    }
}

impl RunConfig {
    /// Fills every defaulted option so the result is self-contained.
    pub fn resolve(mut self) -> CliResult<Self> {
        let row = table_row(self.environment.as_ref());
        let t = &mut self.train;
        t.iterations.get_or_insert(row.iterations);
        t.episodes.get_or_insert(row.episodes);
        t.lr_base.get_or_insert(row.lr.0);
        t.lr_decay.get_or_insert(row.lr.1);
        t.q_l.get_or_insert(row.q_l);
        t.q_m.get_or_insert(row.q_m);
        t.use_mean_baseline.get_or_insert(false);
        t.adam_beta1.get_or_insert(0.9);
        t.adam_beta2.get_or_insert(0.999);
        t.adam_epsilon.get_or_insert(1e-8);
        self.policy.base_rate.get_or_insert(row.base_rate);
        self.policy.init_seed.get_or_insert(self.seed);
        let needs_env = !matches!(
            self.command,
            Command::SampleCheck | Command::GradCheck | Command::ReplayConvert
        );
        if needs_env && self.environment.is_none() {
            return Err(CliError::Config(
                "this command needs an [environment] section".into(),
            ));
        }
        if self.command == Command::ReplayConvert && self.replay_convert.is_none() {
            return Err(CliError::Config(
                "replay-convert needs a [replay_convert] section".into(),
            ));
        }
        Ok(self)
    }

    pub fn train_config(&self) -> pointrl_core::TrainConfig {
        let t = &self.train;
        let missing = "resolved config";
        pointrl_core::TrainConfig {
            iterations: t.iterations.expect(missing),
            episodes: t.episodes.expect(missing),
            lr: pointrl_core::LrSchedule {
                base: t.lr_base.expect(missing),
                decay: t.lr_decay.expect(missing),
            },
            q_l: t.q_l.expect(missing),
            q_m: t.q_m.expect(missing),
            seed: self.seed,
            use_mean_baseline: t.use_mean_baseline.expect(missing),
            adam: pointrl_core::reinforce::AdamConfig {
                beta1: t.adam_beta1.expect(missing),
                beta2: t.adam_beta2.expect(missing),
                epsilon: t.adam_epsilon.expect(missing),
            },
        }
    }
}

/// Contents of `run-manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            tool: "pointrl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
        }
    }
}

/// Sets `dotted.key = raw` in a JSON tree; `raw` is read as a TOML value and
/// falls back to a plain string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let value: Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut table) => serde_json::to_value(table.remove("v").expect("parsed key"))
            .map_err(|e| CliError::Config(e.to_string()))?,
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut node = tree;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match node {
            Value::Object(map) => map,
            _ => {
                return Err(CliError::Config(format!(
                    "override `{key}`: `{part}` is not inside a table"
                )))
            }
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Reads a TOML config or a `run-manifest.json`, applies overrides and
/// resolves defaults.
pub fn load(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut tree: Value = if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(manifest.config).map_err(|e| CliError::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let config: RunConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.resolve()
}

pub fn parse_str(text: &str) -> CliResult<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    config.resolve()
}
