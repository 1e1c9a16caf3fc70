use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use nudge_core::event::{read_records, LogRecord, UserMeta};
use nudge_core::metrics::Report;
use nudge_core::policy::InterventionRecord;
use nudge_core::schedule::PhasePlan;
use nudge_core::service::{serve, Service, ServiceConfig};
use nudge_core::sim::{replay, run_experiment, ReplayOptions, SimConfig, Spans};
use nudge_core::Engine;

#[derive(Parser)]
#[command(name = "nudge", version, about = "Adaptive, explainable overuse interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random draw; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the loop service over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Warm-start from a recorded study log instead of a simulation.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Simulate a full study and write its log, records, schedule and report.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-derive intervention records from a log.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
    /// Rebuild every model from a log and write the checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
    /// Compute per-user, per-arm and per-block tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        /// Records to report on; replayed from the log when absent.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

/// Replay settings file.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ReplayFile {
    cooldown_ms: Option<i64>,
    freeze_adaptive: Option<bool>,
    hyperparams: Option<nudge_core::learner::Hyperparams>,
}

/// Serve settings file.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ServeFile {
    service: ServiceConfig,
    /// Simulation used to warm the engine when no log is given.
    warm_start: Option<SimConfig>,
}

fn read_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_records(BufReader::new(f))?)
}

fn replay_options(common: &Common) -> Result<ReplayOptions> {
    let file: ReplayFile = read_toml(common.config.as_deref())?;
    let mut hp = file.hyperparams;
    if let Some(seed) = common.seed {
        hp.get_or_insert_with(Default::default).seed = seed;
    }
    Ok(ReplayOptions {
        cooldown_ms: file.cooldown_ms,
        hyperparams: hp,
        freeze_adaptive: file.freeze_adaptive,
    })
}

fn write_records(path: &Path, records: &[InterventionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_intervention_records(path: &Path) -> Result<Vec<InterventionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("record line {}", i + 1)))
        .collect()
}

fn study_parts(records: &[LogRecord]) -> Result<(PhasePlan, Vec<UserMeta>)> {
    let plan = records
        .iter()
        .find_map(|r| match r {
            LogRecord::Study(s) => Some(s.plan),
            _ => None,
        })
        .context("log has no study record")?;
    let users = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::User(u) => Some(u.clone()),
            _ => None,
        })
        .collect();
    Ok((plan, users))
}

fn simulate(common: &Common) -> Result<()> {
    let mut config: SimConfig = read_toml(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    std::fs::create_dir_all(&common.out)?;
    config.keep_log = true;
    config.output.log = Some(common.out.join("log.ndjson"));
    config.output.records = Some(common.out.join("records.ndjson"));
    config.output.schedule = Some(common.out.join("schedule.csv"));
    let exp = run_experiment(config)?;
    let report = Report::build(
        exp.engine.records(),
        exp.engine.log(),
        &exp.users,
        &exp.config.plan(),
    );
    report.write_dir(&common.out.join("report"))?;
    println!(
        "simulated {} users: {} events, {} interventions, {} model updates -> {}",
        exp.users.len(),
        exp.engine.log().len(),
        exp.engine.records().len(),
        exp.engine.updates().len(),
        common.out.display()
    );
    Ok(())
}

fn run_replay(common: &Common, log: &Path) -> Result<Engine> {
    let records = read_log(log)?;
    Ok(replay(&records, &replay_options(common)?)?)
}

fn train(common: &Common, log: &Path) -> Result<()> {
    let engine = run_replay(common, log)?;
    std::fs::create_dir_all(&common.out)?;
    for rt in engine.users() {
        let id = &rt.meta.user_id;
        if let Some(m) = &rt.personalized {
            std::fs::write(common.out.join(format!("{id}.personalized.json")), m.to_json())?;
        }
        if let Some(m) = &rt.adaptive {
            std::fs::write(common.out.join(format!("{id}.adaptive.json")), m.to_json())?;
        }
    }
    let mut w = BufWriter::new(File::create(common.out.join("updates.ndjson"))?);
    for u in engine.updates() {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!(
        "trained {} models for {} users -> {}",
        engine.updates().iter().filter(|u| u.trained).count(),
        engine.users().len(),
        common.out.display()
    );
    Ok(())
}

fn report(common: &Common, log: &Path, records: Option<&Path>) -> Result<()> {
    let log_records = read_log(log)?;
    let (plan, users) = study_parts(&log_records)?;
    let engine = replay(&log_records, &replay_options(common)?)?;
    let interventions = match records {
        Some(p) => read_intervention_records(p)?,
        None => engine.records().to_vec(),
    };
    let report = Report::build(&interventions, engine.log(), &users, &plan);
    report.write_dir(&common.out)?;
    for a in &report.arms {
        println!(
            "{:<16} n={:<5} accuracy={:<8} receptivity={:<8} (normalized {} / {})",
            a.arm.as_str(),
            a.interventions,
            fmt(a.mean_accuracy),
            fmt(a.mean_receptivity),
            fmt(a.mean_normalized_accuracy),
            fmt(a.mean_normalized_receptivity)
        );
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn warm_engine(common: &Common, log: Option<&Path>, file: &ServeFile) -> Result<Engine> {
    if let Some(log) = log {
        return run_replay(common, log);
    }
    let mut sim = file.warm_start.clone().unwrap_or_else(|| SimConfig {
        n_users: 4,
        spans: Spans {
            modeling_days: 7,
            break_days: 1,
            baseline_days: 1,
            intervention_days: 4,
        },
        ..SimConfig::default()
    });
    if let Some(seed) = common.seed {
        sim.seed = seed;
    }
    log::info!("warming up with a {}-user simulation", sim.n_users);
    Ok(run_experiment(sim)?.engine)
}

fn serve_cmd(common: &Common, log: Option<&Path>) -> Result<()> {
    let file: ServeFile = read_toml(common.config.as_deref())?;
    let engine = warm_engine(common, log, &file)?;
    let mut config = file.service.clone();
    if config.data_dir.is_none() {
        config.data_dir = Some(common.out.clone());
    }
    if config.workers == 0 {
        bail!("workers must be at least 1");
    }
    let service = Service::start(engine, &config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(service, &config.bind))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Serve { common, log } => serve_cmd(common, log.as_deref()),
        Command::Simulate { common } => simulate(common),
        Command::Replay { common, log } => {
            let engine = run_replay(common, log)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("records.ndjson");
            write_records(&path, engine.records())?;
            println!("{} interventions -> {}", engine.records().len(), path.display());
            Ok(())
        }
        Command::Train { common, log } => train(common, log),
        Command::Report {
            common,
            log,
            records,
        } => report(common, log, records.as_deref()),
    }
}
