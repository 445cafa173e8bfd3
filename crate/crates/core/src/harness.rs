//! Experiment configuration, the arm runner, evaluation and run metrics.
//!
//! A run writes one CSV log: `#`-prefixed header lines echoing the
//! configuration, a column header, one row per evaluation and a trailing
//! `# status=...` line. Rows are flushed as they are produced, so an aborted
//! run leaves a readable partial log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{AgentError, Blend, Greedy, Hyper, Policy, ScheduleParams, Td3Agent, UpdateMode, UpdateStats};
use crate::demogen::{rollout, DemoError};
use crate::envs::{EnvError, Geometry, GoalEnv, TaskKind};
use crate::replay::{init_from_demos_pinned, load_demos, DemoDataset, ReplayBuffer, ReplayError, DEFAULT_CAPACITY};

pub const LOG_COLUMNS: [&str; 9] = [
    "t",
    "success_rate",
    "episodes",
    "wall_ms",
    "f_t",
    "g_t",
    "lambda",
    "critic_loss",
    "actor_obj",
];

/// Success threshold for `steps_to_90`.
pub const SUCCESS_THRESHOLD: f64 = 0.9;
/// Further evaluations that must stay above the threshold.
pub const SUSTAIN_EVALS: usize = 3;
/// Band around the final rate that counts as converged.
pub const CONVERGENCE_BAND: f64 = 0.05;
/// Evaluations averaged into the final rate.
pub const FINAL_WINDOW: usize = 5;

/// Offset mixed into the run seed for evaluation episodes, keeping them
/// apart from the training stream.
const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: unknown key `{0}`")]
    UnknownKey(String),
    #[error("config: bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("log line {line}: {message}")]
    LogParse { line: usize, message: String },
    #[error("log has no evaluation at or before the offline budget")]
    NoOfflineRecord,
    #[error("run aborted after {records} evaluations: {source}")]
    Aborted {
        records: usize,
        #[source]
        source: AgentError,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether the error stems from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::UnknownKey(_)
                | HarnessError::BadValue { .. }
                | HarnessError::ConfigSyntax { .. }
                | HarnessError::Config(_)
                | HarnessError::Agent(AgentError::Invalid(_))
        )
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// TD3+BC offline, then the scheduled transition to TD3.
    Unified,
    /// TD3 from scratch.
    Td3,
    /// Behaviour cloning offline, then TD3 with fresh critics.
    BcTd3,
    /// TD3+BC offline, then an abrupt switch to TD3.
    Td3bcTd3,
    /// Behaviour cloning only.
    BcOnly,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Unified, Arm::Td3, Arm::BcTd3, Arm::Td3bcTd3, Arm::BcOnly];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Unified => "unified",
            Arm::Td3 => "td3",
            Arm::BcTd3 => "bc_td3",
            Arm::Td3bcTd3 => "td3bc_td3",
            Arm::BcOnly => "bc_only",
        }
    }

    pub fn needs_demos(self) -> bool {
        self != Arm::Td3
    }

    pub fn has_offline_phase(self) -> bool {
        self != Arm::Td3
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (expected unified, td3, bc_td3, td3bc_td3 or bc_only)"))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub gsi: bool,
    pub arm: Arm,
    pub demo_path: Option<PathBuf>,
    pub hyper: Hyper,
    pub schedule: ScheduleParams,
    /// Environment steps (and updates) after the offline phase.
    pub online_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Groups runs in reports and names the log file; derived when empty.
    pub label: String,
    pub capacity: usize,
    /// Keep demonstrations in the buffer for the whole run.
    pub pin_demos: bool,
    /// Record elapsed time in `wall_ms`; off keeps logs byte-reproducible.
    pub wall_clock: bool,
    pub geometry: Geometry,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Reach,
            gsi: false,
            arm: Arm::Unified,
            demo_path: None,
            hyper: Hyper::default(),
            schedule: ScheduleParams::default(),
            online_steps: 20_000,
            eval_interval: 500,
            eval_episodes: 20,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            label: String::new(),
            capacity: DEFAULT_CAPACITY,
            pin_demos: false,
            wall_clock: false,
            geometry: Geometry::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| HarnessError::BadValue {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(HarnessError::BadValue {
            key: key.to_string(),
            message: format!("expected true or false, got `{other}`"),
        }),
    }
}

fn parse_hidden(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|w| parse_value::<usize>("hidden", w))
        .collect()
}

impl ExperimentConfig {
    /// Every recognised key, in echo order.
    pub const KEYS: [&'static str; 32] = [
        "task",
        "gsi",
        "arm",
        "demo_path",
        "gamma",
        "tau",
        "alpha",
        "batch_size",
        "actor_lr",
        "critic_lr",
        "policy_delay",
        "hidden",
        "bootstrap_timeouts",
        "n_off",
        "delta_trans",
        "sigma",
        "noise_clip",
        "eta_std",
        "online_steps",
        "eval_interval",
        "eval_episodes",
        "seed",
        "out_dir",
        "label",
        "capacity",
        "pin_demos",
        "wall_clock",
        "step_scale",
        "success_radius",
        "grip_radius",
        "horizon",
        "min_separation",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = parse_value(key, v)?,
            "gsi" => self.gsi = parse_bool(key, v)?,
            "arm" => self.arm = parse_value(key, v)?,
            "demo_path" => self.demo_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "gamma" => self.hyper.gamma = parse_value(key, v)?,
            "tau" => self.hyper.tau = parse_value(key, v)?,
            "alpha" => self.hyper.alpha = parse_value(key, v)?,
            "batch_size" => self.hyper.batch_size = parse_value(key, v)?,
            "actor_lr" => self.hyper.actor_lr = parse_value(key, v)?,
            "critic_lr" => self.hyper.critic_lr = parse_value(key, v)?,
            "policy_delay" => self.hyper.policy_delay = parse_value(key, v)?,
            "hidden" => self.hyper.hidden = parse_hidden(v)?,
            "bootstrap_timeouts" => self.hyper.bootstrap_timeouts = parse_bool(key, v)?,
            "n_off" => self.schedule.n_off = parse_value(key, v)?,
            "delta_trans" => self.schedule.delta_trans = parse_value(key, v)?,
            "sigma" => self.schedule.sigma = parse_value(key, v)?,
            "noise_clip" => self.schedule.noise_clip = parse_value(key, v)?,
            "eta_std" => self.schedule.eta_std = parse_value(key, v)?,
            "online_steps" => self.online_steps = parse_value(key, v)?,
            "eval_interval" => self.eval_interval = parse_value(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "label" => self.label = v.to_string(),
            "capacity" => self.capacity = parse_value(key, v)?,
            "pin_demos" => self.pin_demos = parse_bool(key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "step_scale" => self.geometry.step_scale = parse_value(key, v)?,
            "success_radius" => self.geometry.success_radius = parse_value(key, v)?,
            "grip_radius" => self.geometry.grip_radius = parse_value(key, v)?,
            "horizon" => self.geometry.horizon = parse_value(key, v)?,
            "min_separation" => self.geometry.min_separation = parse_value(key, v)?,
            _ => return Err(HarnessError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "task" => self.task.name().to_string(),
            "gsi" => self.gsi.to_string(),
            "arm" => self.arm.name().to_string(),
            "demo_path" => self.demo_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "gamma" => self.hyper.gamma.to_string(),
            "tau" => self.hyper.tau.to_string(),
            "alpha" => self.hyper.alpha.to_string(),
            "batch_size" => self.hyper.batch_size.to_string(),
            "actor_lr" => self.hyper.actor_lr.to_string(),
            "critic_lr" => self.hyper.critic_lr.to_string(),
            "policy_delay" => self.hyper.policy_delay.to_string(),
            "hidden" => self.hyper.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "bootstrap_timeouts" => self.hyper.bootstrap_timeouts.to_string(),
            "n_off" => self.schedule.n_off.to_string(),
            "delta_trans" => self.schedule.delta_trans.to_string(),
            "sigma" => self.schedule.sigma.to_string(),
            "noise_clip" => self.schedule.noise_clip.to_string(),
            "eta_std" => self.schedule.eta_std.to_string(),
            "online_steps" => self.online_steps.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "label" => self.label.clone(),
            "capacity" => self.capacity.to_string(),
            "pin_demos" => self.pin_demos.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "step_scale" => self.geometry.step_scale.to_string(),
            "success_radius" => self.geometry.success_radius.to_string(),
            "grip_radius" => self.geometry.grip_radius.to_string(),
            "horizon" => self.geometry.horizon.to_string(),
            "min_separation" => self.geometry.min_separation.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// `(key, value)` for every field, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|k| (*k, self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.schedule.validate()?;
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval_interval and eval_episodes must be positive".into()));
        }
        if self.capacity < self.hyper.batch_size {
            return Err(HarnessError::Config("capacity must hold at least one batch".into()));
        }
        let g = &self.geometry;
        if !(g.step_scale > 0.0 && g.success_radius > 0.0 && g.grip_radius > 0.0 && g.min_separation >= 0.0) || g.horizon == 0 {
            return Err(HarnessError::Config("geometry values must be positive".into()));
        }
        if self.arm.needs_demos() && self.demo_path.is_none() {
            return Err(HarnessError::Config(format!("arm {} needs demo_path", self.arm)));
        }
        Ok(())
    }

    /// Report group: the label, or `arm/task` with a `+gsi` suffix.
    pub fn group(&self) -> String {
        if !self.label.is_empty() {
            return self.label.clone();
        }
        format!("{}/{}{}", self.arm, self.task.name(), if self.gsi { "+gsi" } else { "" })
    }

    pub fn log_file_name(&self) -> String {
        format!("{}_seed{}.csv", self.group().replace(['/', '+'], "_"), self.seed)
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(self.log_file_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub t: u64,
    pub success_rate: f64,
    pub episodes: usize,
    pub wall_ms: u64,
}

/// Greedy success rate over `n_episodes` episodes.
///
/// Episode seeds come from a generator seeded with `seed` alone, so no
/// caller RNG is consumed and equal seeds give equal records. `t` and
/// `wall_ms` are left at 0 for the caller to fill in.
pub fn evaluate<P: Policy + ?Sized>(policy: &mut P, env: &mut GoalEnv, n_episodes: usize, seed: u64) -> Result<EvalRecord> {
    if n_episodes == 0 {
        return Err(HarnessError::Config("n_episodes must be positive".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0usize;
    for _ in 0..n_episodes {
        let (_, ok) = rollout(policy, env, seeds.random())?;
        successes += ok as usize;
    }
    Ok(EvalRecord {
        t: 0,
        success_rate: successes as f64 / n_episodes as f64,
        episodes: n_episodes,
        wall_ms: 0,
    })
}

/// One evaluation row with the training diagnostics at that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub record: EvalRecord,
    pub f_t: f64,
    pub g_t: f64,
    pub lambda: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_obj: Option<f64>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LogRow {
    fn csv_line(self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.record.t,
            self.record.success_rate,
            self.record.episodes,
            self.record.wall_ms,
            self.f_t,
            self.g_t,
            opt_field(self.lambda),
            opt_field(self.critic_loss),
            opt_field(self.actor_obj)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub version: String,
    pub config: ExperimentConfig,
    pub rows: Vec<LogRow>,
    pub complete: bool,
}

impl RunLog {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.rows.iter().map(|r| r.record).collect()
    }

    pub fn steps_to_90(&self) -> Option<u64> {
        steps_to_threshold(&self.records(), SUCCESS_THRESHOLD)
    }

    pub fn steps_to_convergence(&self) -> Option<u64> {
        steps_to_convergence(&self.records())
    }

    pub fn final_rate(&self) -> Option<f64> {
        final_rate(&self.records())
    }

    /// Drop over the default window (`W = Δ_trans`), or `None` for logs
    /// without an offline phase.
    pub fn transition_drop(&self) -> Option<f64> {
        if !self.config.arm.has_offline_phase() {
            return None;
        }
        let s = &self.config.schedule;
        transition_drop(&self.records(), s.n_off, s.delta_trans, s.delta_trans).ok()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, &self.version, &self.config)?;
        for row in &self.rows {
            writeln!(w, "{}", row.csv_line())?;
        }
        write_status(&mut w, self.complete, None)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut version = String::new();
        let mut rows = Vec::new();
        let mut complete = false;
        let mut seen_columns = false;
        let bad = |line: usize, message: String| HarnessError::LogParse { line, message };
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let n = i + 1;
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.trim().split_once('=').ok_or_else(|| bad(n, "expected `# key=value`".into()))?;
                match k {
                    "version" => version = v.to_string(),
                    "status" => complete = v.split_whitespace().next() == Some("complete"),
                    "error" => {}
                    _ => config.set(k, v).map_err(|e| bad(n, e.to_string()))?,
                }
                continue;
            }
            if !seen_columns {
                if line != LOG_COLUMNS.join(",") {
                    return Err(bad(n, format!("unexpected column header `{line}`")));
                }
                seen_columns = true;
                continue;
            }
            rows.push(parse_row(&line).map_err(|m| bad(n, m))?);
        }
        if !seen_columns {
            return Err(bad(0, "missing column header".into()));
        }
        Ok(RunLog {
            version,
            config,
            rows,
            complete,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn parse_row(line: &str) -> std::result::Result<LogRow, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != LOG_COLUMNS.len() {
        return Err(format!("expected {} fields, got {}", LOG_COLUMNS.len(), fields.len()));
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        fields[i].parse::<f64>().map_err(|e| format!("{}: {e}", LOG_COLUMNS[i]))
    };
    let int = |i: usize| -> std::result::Result<u64, String> {
        fields[i].parse::<u64>().map_err(|e| format!("{}: {e}", LOG_COLUMNS[i]))
    };
    let opt = |i: usize| -> std::result::Result<Option<f64>, String> {
        if fields[i].is_empty() {
            Ok(None)
        } else {
            num(i).map(Some)
        }
    };
    Ok(LogRow {
        record: EvalRecord {
            t: int(0)?,
            success_rate: num(1)?,
            episodes: int(2)? as usize,
            wall_ms: int(3)?,
        },
        f_t: num(4)?,
        g_t: num(5)?,
        lambda: opt(6)?,
        critic_loss: opt(7)?,
        actor_obj: opt(8)?,
    })
}

fn write_header<W: Write>(w: &mut W, version: &str, config: &ExperimentConfig) -> std::io::Result<()> {
    writeln!(w, "# version={version}")?;
    for (k, v) in config.to_pairs() {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "{}", LOG_COLUMNS.join(","))
}

fn write_status<W: Write>(w: &mut W, complete: bool, error: Option<&str>) -> std::io::Result<()> {
    if let Some(e) = error {
        writeln!(w, "# error={}", e.replace('\n', " "))?;
    }
    writeln!(w, "# status={}", if complete { "complete" } else { "incomplete" })?;
    w.flush()
}

/// Version tag written into every log.
pub fn version_tag() -> String {
    format!("o2o-core {}", env!("CARGO_PKG_VERSION"))
}

/// First `t` with success ≥ `threshold` that holds for the next
/// [`SUSTAIN_EVALS`] evaluations (or as many as the log has left).
pub fn steps_to_threshold(records: &[EvalRecord], threshold: f64) -> Option<u64> {
    (0..records.len()).find_map(|i| {
        let end = (i + 1 + SUSTAIN_EVALS).min(records.len());
        records[i..end]
            .iter()
            .all(|r| r.success_rate >= threshold)
            .then_some(records[i].t)
    })
}

/// Mean success over the last [`FINAL_WINDOW`] evaluations.
pub fn final_rate(records: &[EvalRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let tail = &records[records.len().saturating_sub(FINAL_WINDOW)..];
    Some(tail.iter().map(|r| r.success_rate).sum::<f64>() / tail.len() as f64)
}

/// First `t` from which every evaluation stays within [`CONVERGENCE_BAND`]
/// of the final rate.
pub fn steps_to_convergence(records: &[EvalRecord]) -> Option<u64> {
    let fin = final_rate(records)?;
    let inside = |r: &EvalRecord| (r.success_rate - fin).abs() <= CONVERGENCE_BAND + 1e-12;
    let mut start = None;
    for (i, r) in records.iter().enumerate().rev() {
        if inside(r) {
            start = Some(i);
        } else {
            break;
        }
    }
    start.map(|i| records[i].t)
}

/// Success at the last evaluation with `t ≤ n_off` minus the minimum over
/// evaluations with `n_off ≤ t ≤ n_off + delta_trans + window`, in
/// percentage points.
pub fn transition_drop(records: &[EvalRecord], n_off: u64, delta_trans: u64, window: u64) -> Result<f64> {
    let offline = records
        .iter().rfind(|r| r.t <= n_off)
        .ok_or(HarnessError::NoOfflineRecord)?;
    let end = n_off + delta_trans + window;
    let min = records
        .iter()
        .filter(|r| r.t >= n_off && r.t <= end)
        .map(|r| r.success_rate)
        .fold(offline.success_rate, f64::min);
    Ok(100.0 * (offline.success_rate - min))
}

fn load_matching_demos(config: &ExperimentConfig, env: &GoalEnv) -> Result<Option<DemoDataset>> {
    let Some(path) = &config.demo_path else {
        return Ok(None);
    };
    let demos = load_demos(path)?;
    check_demos(config, env, &demos)?;
    Ok(Some(demos))
}

fn check_demos(config: &ExperimentConfig, env: &GoalEnv, demos: &DemoDataset) -> Result<()> {
    let m = &demos.metadata;
    if m.task != config.task.name() || m.gsi != config.gsi {
        return Err(HarnessError::Config(format!(
            "demos were recorded for task {} gsi={}, run is task {} gsi={}",
            m.task,
            m.gsi,
            config.task.name(),
            config.gsi
        )));
    }
    if m.obs_dim != env.obs_dim() || m.act_dim != env.action_dim() {
        return Err(HarnessError::Config("demo dimensions do not match the environment".into()));
    }
    Ok(())
}

/// Runs `config`, loading demonstrations from `demo_path` and writing the
/// log to [`ExperimentConfig::log_path`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunLog> {
    config.validate()?;
    let env = GoalEnv::new(config.task, config.gsi, config.geometry);
    let demos = load_matching_demos(config, &env)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let out = BufWriter::new(File::create(config.log_path())?);
    run_with(config, demos.as_ref(), out)
}

/// Runs `config` with in-memory demonstrations (`demo_path` is only echoed),
/// streaming the log to `out`.
///
/// A failure during training writes the rows so far, an `# error=` line and
/// `# status=incomplete`, then returns [`HarnessError::Aborted`].
pub fn run_with<W: Write>(config: &ExperimentConfig, demos: Option<&DemoDataset>, mut out: W) -> Result<RunLog> {
    config.hyper.validate()?;
    config.schedule.validate()?;
    if config.eval_interval == 0 || config.eval_episodes == 0 {
        return Err(HarnessError::Config("eval_interval and eval_episodes must be positive".into()));
    }
    let mut env = GoalEnv::new(config.task, config.gsi, config.geometry);
    if config.arm.needs_demos() && demos.is_none() {
        return Err(HarnessError::Config(format!("arm {} needs demonstrations", config.arm)));
    }
    if let Some(d) = demos {
        check_demos(config, &env, d)?;
    }

    let mut buffer = match demos {
        Some(d) => init_from_demos_pinned(d, config.capacity, config.pin_demos)?,
        None => ReplayBuffer::new(config.capacity)?,
    };

    let version = version_tag();
    write_header(&mut out, &version, config)?;
    let mut runner = Runner {
        config,
        eval_env: GoalEnv::new(config.task, config.gsi, config.geometry),
        eval_seed: config.seed.wrapping_add(EVAL_SEED_OFFSET),
        start: Instant::now(),
        rows: Vec::new(),
        last: Diagnostics::default(),
        out: &mut out,
    };

    let outcome = runner.train(&mut env, &mut buffer);
    let rows = std::mem::take(&mut runner.rows);
    match outcome {
        Ok(()) => {
            write_status(&mut out, true, None)?;
            Ok(RunLog {
                version,
                config: config.clone(),
                rows,
                complete: true,
            })
        }
        Err(RunFailure::Agent(source)) => {
            write_status(&mut out, false, Some(&source.to_string()))?;
            Err(HarnessError::Aborted {
                records: rows.len(),
                source,
            })
        }
        Err(RunFailure::Other(e)) => {
            let _ = write_status(&mut out, false, Some(&e.to_string()));
            Err(e)
        }
    }
}

enum RunFailure {
    Agent(AgentError),
    Other(HarnessError),
}

impl From<AgentError> for RunFailure {
    fn from(e: AgentError) -> Self {
        RunFailure::Agent(e)
    }
}

impl From<HarnessError> for RunFailure {
    fn from(e: HarnessError) -> Self {
        RunFailure::Other(e)
    }
}

impl From<std::io::Error> for RunFailure {
    fn from(e: std::io::Error) -> Self {
        RunFailure::Other(e.into())
    }
}

/// Latest value of each diagnostic; actor terms only change on delayed steps.
#[derive(Debug, Default, Clone, Copy)]
struct Diagnostics {
    lambda: Option<f64>,
    critic_loss: Option<f64>,
    actor_obj: Option<f64>,
}

impl Diagnostics {
    fn absorb(&mut self, s: &UpdateStats) {
        if let Some((l1, l2)) = s.critic_loss {
            self.critic_loss = Some(0.5 * (l1 + l2));
        }
        if s.actor_objective.is_some() {
            self.actor_obj = s.actor_objective;
            self.lambda = s.lambda;
        }
    }
}

struct Runner<'a, W: Write> {
    config: &'a ExperimentConfig,
    eval_env: GoalEnv,
    eval_seed: u64,
    start: Instant,
    rows: Vec<LogRow>,
    last: Diagnostics,
    out: &'a mut W,
}

impl<W: Write> Runner<'_, W> {
    fn train(&mut self, env: &mut GoalEnv, buffer: &mut ReplayBuffer) -> std::result::Result<(), RunFailure> {
        let c = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let blend = match c.arm {
            Arm::Unified => Blend::Unified,
            Arm::Td3 => Blend::Online,
            Arm::BcTd3 | Arm::Td3bcTd3 | Arm::BcOnly => Blend::Switch,
        };
        let mut schedule = c.schedule.clone();
        if c.arm == Arm::Td3 {
            schedule.n_off = 0;
        }
        let n_off = schedule.n_off;
        let mut agent = Td3Agent::new(env.obs_dim(), env.action_dim(), c.hyper.clone(), schedule, blend, &mut rng)?;

        if c.arm.has_offline_phase() {
            let mode = match c.arm {
                Arm::BcTd3 | Arm::BcOnly => UpdateMode::BehaviorCloning,
                _ => UpdateMode::ActorCritic,
            };
            agent.train_offline::<_, RunFailure, _>(buffer, n_off, mode, &mut rng, |a, s| self.after_update(a, s))?;
            self.ensure_record(&agent)?;
            if c.arm == Arm::BcOnly {
                return Ok(());
            }
            if c.arm == Arm::BcTd3 {
                agent.reset_critics(&mut rng)?;
            }
        }
        agent.train_online::<_, RunFailure, _>(env, buffer, c.online_steps, &mut rng, |a, s| self.after_update(a, s))?;
        self.ensure_record(&agent)?;
        Ok(())
    }

    fn after_update(&mut self, agent: &Td3Agent, stats: &UpdateStats) -> std::result::Result<(), RunFailure> {
        self.last.absorb(stats);
        if agent.t().is_multiple_of(self.config.eval_interval) {
            self.record(agent)?;
        }
        Ok(())
    }

    /// Evaluates at the agent's current `t` unless that row already exists.
    fn ensure_record(&mut self, agent: &Td3Agent) -> std::result::Result<(), RunFailure> {
        if self.rows.last().map(|r| r.record.t) != Some(agent.t()) {
            self.record(agent)?;
        }
        Ok(())
    }

    fn record(&mut self, agent: &Td3Agent) -> std::result::Result<(), RunFailure> {
        let t = agent.t();
        let mut rec = evaluate(&mut Greedy(agent), &mut self.eval_env, self.config.eval_episodes, self.eval_seed)?;
        rec.t = t;
        if self.config.wall_clock {
            rec.wall_ms = self.start.elapsed().as_millis() as u64;
        }
        let row = LogRow {
            record: rec,
            f_t: agent.bc_weight(t),
            g_t: agent.explore_weight(t),
            lambda: self.last.lambda,
            critic_loss: self.last.critic_loss,
            actor_obj: self.last.actor_obj,
        };
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()?;
        self.rows.push(row);
        Ok(())
    }
}

/// Mean, sample standard deviation and count of the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Runs contributing a value.
    pub count: usize,
    /// Runs in the group.
    pub total: usize,
}

impl Aggregate {
    pub fn of(values: &[Option<f64>]) -> Self {
        let xs: Vec<f64> = values.iter().flatten().copied().collect();
        let n = xs.len();
        let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
        let std = mean.map(|m| {
            if n < 2 {
                0.0
            } else {
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        Aggregate {
            mean,
            std,
            count: n,
            total: values.len(),
        }
    }

    fn display(&self, scale: f64, decimals: usize) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => {
                let mut out = format!("{:.*} ± {:.*}", decimals, m * scale, decimals, s * scale);
                if self.count < self.total {
                    let _ = write!(out, " ({}/{})", self.count, self.total);
                }
                out
            }
            _ => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub steps_to_90: Option<u64>,
    pub steps_to_convergence: Option<u64>,
    pub final_rate: Option<f64>,
    pub transition_drop: Option<f64>,
}

impl RunMetrics {
    pub fn of(log: &RunLog) -> Self {
        RunMetrics {
            steps_to_90: log.steps_to_90(),
            steps_to_convergence: log.steps_to_convergence(),
            final_rate: log.final_rate(),
            transition_drop: log.transition_drop(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub steps_to_90: Aggregate,
    pub steps_to_convergence: Aggregate,
    pub final_rate: Aggregate,
    pub transition_drop: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Per-group metrics aggregated across seeds. Groups come out sorted.
pub fn report(logs: &[RunLog]) -> Summary {
    let mut groups: BTreeMap<String, Vec<RunMetrics>> = BTreeMap::new();
    for log in logs {
        groups.entry(log.config.group()).or_default().push(RunMetrics::of(log));
    }
    let rows = groups
        .into_iter()
        .map(|(group, ms)| {
            let col = |f: &dyn Fn(&RunMetrics) -> Option<f64>| Aggregate::of(&ms.iter().map(f).collect::<Vec<_>>());
            SummaryRow {
                group,
                steps_to_90: col(&|m| m.steps_to_90.map(|t| t as f64)),
                steps_to_convergence: col(&|m| m.steps_to_convergence.map(|t| t as f64)),
                final_rate: col(&|m| m.final_rate),
                transition_drop: col(&|m| m.transition_drop),
            }
        })
        .collect();
    Summary { rows }
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,seeds");
        for m in ["steps_to_90", "steps_to_convergence", "final_rate", "transition_drop"] {
            let _ = write!(s, ",{m}_mean,{m}_std,{m}_n");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.group, r.steps_to_90.total);
            for a in [&r.steps_to_90, &r.steps_to_convergence, &r.final_rate, &r.transition_drop] {
                let _ = write!(s, ",{},{},{}", opt_field(a.mean), opt_field(a.std), a.count);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["group", "seeds", "steps to 90%", "steps to convergence", "final success (%)", "transition drop (pts)"];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.group.clone(),
                r.steps_to_90.total.to_string(),
                r.steps_to_90.display(1.0, 0),
                r.steps_to_convergence.display(1.0, 0),
                r.final_rate.display(100.0, 1),
                r.transition_drop.display(1.0, 1),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}", w = *w))
                .collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        }
        s
    }
}
