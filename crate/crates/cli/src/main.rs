//! `o2o`: generate demonstrations, train arms, sweep seeds and summarise logs.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 when a run aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use o2o_core::demogen::{calibrate_corruption_with, generate_demos, ScriptedPolicy, CALIBRATION_ROLLOUTS};
use o2o_core::envs::{Geometry, GoalEnv, TaskKind};
use o2o_core::harness::{report, run_with, Arm, ExperimentConfig, HarnessError, RunLog};
use o2o_core::replay::{load_demos, save_demos};

#[derive(Parser, Debug)]
#[command(name = "o2o", version, about = "Offline-to-online actor-critic experiments on goal tasks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Record scripted demonstrations to a JSON-lines file.
    GenDemos(GenDemos),
    /// Run one experiment and write its log.
    Train(Train),
    /// Summarise run logs across seeds.
    Report(Report),
    /// Run every arm × seed combination in parallel, then report.
    Sweep(Sweep),
}

#[derive(Args, Debug)]
struct GenDemos {
    #[arg(long, default_value = "reach")]
    task: TaskKind,
    /// Include the goal-aware observation block.
    #[arg(long)]
    gsi: bool,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-step probability of replacing the expert action with a random one.
    #[arg(long, conflicts_with = "target_rate")]
    corruption: Option<f64>,
    /// Calibrate the corruption to this success rate instead.
    #[arg(long)]
    target_rate: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = CALIBRATION_ROLLOUTS)]
    calibration_rollouts: usize,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct Report {
    /// Log files, or directories whose `.csv` files are read.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Also write the summary as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Comma-separated arms.
    #[arg(long, value_delimiter = ',', default_value = "unified,td3,bc_td3,td3bc_td3,bc_only")]
    arms: Vec<Arm>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

/// A key=value config file plus one `--key` flag per config field.
#[derive(Debug, Default)]
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigArgs::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        if let Some(f) = m.get_one::<PathBuf>("config") {
            self.file = Some(f.clone());
        }
        for key in ExperimentConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value config file; flags override it"),
        );
        ExperimentConfig::KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Config"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut config = match &self.file {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::config)?,
            None => ExperimentConfig::default(),
        };
        for (k, v) in &self.overrides {
            config.set(k, v).map_err(|e| Failure::config(e.into()))?;
        }
        Ok(config)
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }

    /// Configuration problems map to 1, everything else to 2.
    fn classify(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::config(e.into())
        } else {
            Failure::runtime(e.into())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::GenDemos(a) => gen_demos(a),
        Cmd::Train(a) => train(a),
        Cmd::Report(a) => run_report(a),
        Cmd::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn gen_demos(a: GenDemos) -> Result<(), Failure> {
    if a.episodes == 0 {
        return Err(Failure::config(anyhow!("--episodes must be positive")));
    }
    let geometry = Geometry::default();
    let p = match (a.corruption, a.target_rate) {
        (Some(p), _) if !(0.0..=1.0).contains(&p) => {
            return Err(Failure::config(anyhow!("--corruption must lie in [0, 1]")));
        }
        (Some(p), _) => p,
        (None, Some(rate)) => {
            let p = calibrate_corruption_with(a.task, rate, a.tolerance, geometry, a.calibration_rollouts, a.seed)
                .map_err(|e| Failure::config(e.into()))?;
            println!("calibrated corruption p = {p:.4} for target success {rate}");
            p
        }
        (None, None) => 0.0,
    };
    let expert = p == 0.0;
    let mut policy = if expert {
        ScriptedPolicy::expert(a.task, geometry)
    } else {
        ScriptedPolicy::corrupted(a.task, p, geometry, a.seed)
    };
    let mut env = GoalEnv::new(a.task, a.gsi, geometry);
    let demos = generate_demos(&mut policy, &mut env, a.episodes, expert, a.seed).map_err(|e| Failure::runtime(e.into()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::runtime)?;
    }
    save_demos(&demos, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))
        .map_err(Failure::runtime)?;
    println!(
        "wrote {} episodes ({} transitions, policy {}, success rate {:.3}) to {}",
        demos.episodes.len(),
        demos.num_transitions(),
        demos.metadata.policy_id,
        demos.metadata.success_rate,
        a.out.display()
    );
    Ok(())
}

/// Validates `config`, loads its demonstrations and runs it to its log path.
fn run_config(config: &ExperimentConfig) -> Result<RunLog, Failure> {
    config.validate().map_err(Failure::classify)?;
    let demos = match &config.demo_path {
        Some(path) => Some(
            load_demos(path)
                .with_context(|| format!("loading demonstrations {}", path.display()))
                .map_err(Failure::config)?,
        ),
        None => None,
    };
    let log_path = config.log_path();
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))
        .map_err(Failure::runtime)?;
    let file = std::fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(Failure::runtime)?;
    run_with(config, demos.as_ref(), std::io::BufWriter::new(file)).map_err(|e| {
        let mut f = Failure::classify(e);
        f.error = f.error.context(format!("run logged to {}", log_path.display()));
        f
    })
}

fn train(a: Train) -> Result<(), Failure> {
    let config = a.config.resolve()?;
    let log = run_config(&config)?;
    println!("log: {}", config.log_path().display());
    print!("{}", report(std::slice::from_ref(&log)).to_text());
    Ok(())
}

fn collect_logs(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn load_complete(files: &[PathBuf]) -> anyhow::Result<Vec<RunLog>> {
    let mut logs = Vec::new();
    for f in files {
        let log = RunLog::load(f).with_context(|| format!("reading log {}", f.display()))?;
        if log.complete {
            logs.push(log);
        } else {
            eprintln!("skipping incomplete log {}", f.display());
        }
    }
    Ok(logs)
}

fn print_summary(logs: &[RunLog], csv: Option<&Path>) -> anyhow::Result<()> {
    let summary = report(logs);
    print!("{}", summary.to_text());
    if let Some(path) = csv {
        std::fs::write(path, summary.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_report(a: Report) -> Result<(), Failure> {
    let files = collect_logs(&a.paths).map_err(Failure::config)?;
    let logs = load_complete(&files).map_err(Failure::config)?;
    if logs.is_empty() {
        return Err(Failure::config(anyhow!("no complete logs found")));
    }
    print_summary(&logs, a.csv.as_deref()).map_err(Failure::runtime)
}

fn sweep(a: Sweep) -> Result<(), Failure> {
    let base = a.config.resolve()?;
    let mut configs = Vec::new();
    for &arm in &a.arms {
        for &seed in &a.seeds {
            let mut c = base.clone();
            c.arm = arm;
            c.seed = seed;
            c.validate().map_err(Failure::classify)?;
            configs.push(c);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::runtime(e.into()))?;
    let results: Vec<Result<RunLog, Failure>> = pool.install(|| configs.par_iter().map(run_config).collect());
    let mut logs = Vec::new();
    let mut worst = None;
    for (c, r) in configs.iter().zip(results) {
        match r {
            Ok(log) => logs.push(log),
            Err(f) => {
                eprintln!("{} seed {}: {:#}", c.arm, c.seed, f.error);
                worst = Some(worst.map_or(f.code, |w: u8| w.max(f.code)));
            }
        }
    }
    if !logs.is_empty() {
        print_summary(&logs, Some(&base.out_dir.join("summary.csv"))).map_err(Failure::runtime)?;
    }
    match worst {
        None => Ok(()),
        Some(code) => Err(Failure {
            code,
            error: anyhow!("{} of {} runs failed", configs.len() - logs.len(), configs.len()),
        }),
    }
}
