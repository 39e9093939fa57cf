//! Command-line front end: `generate`, `train`, `eval` and `bench`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::config::{Scale, ScenarioConfig};
use crate::dqn::{train_with, HistoryWindow, QNetwork};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::policies::Policy;
use crate::scenario::{self, Prepared};
use crate::sim_eval::{self, mean_std};
use crate::trace_gen::{read_trace, rng_for, write_trace, TraceEntry};

pub const TRAIN_POPULATION: &str = "population_train.csv";
pub const TEST_POPULATION: &str = "population_test.csv";
pub const METRIC_MAP: &str = "metric_map.csv";
pub const TRAIN_TRACE: &str = "trace_train.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_CURVE: &str = "loss.csv";
pub const SUMMARY_TABLE: &str = "summary.txt";
pub const SUMMARY_KV: &str = "summary.kv";

#[derive(Debug, Parser)]
#[command(name = "offload", version, about = "Token-bucket constrained offloading simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build populations, fit the metric map and write the training trace.
    Generate(Common),
    /// Train the DQN on a generated training trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training trace; defaults to the one written by `generate`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the benchmark policies (and the DQN if a checkpoint exists).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rows of each per-policy decision trace (first seed only).
        #[arg(long, default_value_t = 10_000)]
        trace_rows: usize,
    },
    /// Single-input inference latency of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file; the desk preset is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed_override: Option<u64>,
    #[arg(long, conflicts_with = "paper_scale")]
    pub desk_scale: bool,
    #[arg(long)]
    pub paper_scale: bool,
}

impl Common {
    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::desk(),
        };
        if self.desk_scale {
            cfg.rescale(Scale::Desk);
        }
        if self.paper_scale {
            cfg.rescale(Scale::Paper);
        }
        if let Some(seed) = self.seed_override {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config points with their output directories. A config without a
    /// sweep writes straight into `--out`.
    fn points(&self) -> Result<Vec<(String, ScenarioConfig, PathBuf)>> {
        let cfg = self.scenario()?;
        let swept = !cfg.sweep.is_empty();
        Ok(cfg
            .expand()?
            .into_iter()
            .enumerate()
            .map(|(k, (label, c))| {
                let dir = if swept {
                    self.out.join(format!("point_{k:03}"))
                } else {
                    self.out.clone()
                };
                (label, c, dir)
            })
            .collect())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Generate(common) => {
            for (label, cfg, dir) in common.points()? {
                print_label(&mut stdout, &label)?;
                cmd_generate(&cfg, &dir, &mut stdout)?;
            }
        }
        Command::Train { common, trace } => {
            let points = common.points()?;
            if trace.is_some() && points.len() > 1 {
                return Err(Error::InvalidConfig("--trace cannot be combined with a sweep".into()));
            }
            for (label, cfg, dir) in points {
                print_label(&mut stdout, &label)?;
                let trace = trace.clone().unwrap_or_else(|| dir.join(TRAIN_TRACE));
                cmd_train(&cfg, &trace, &dir, &mut stdout)?;
            }
        }
        Command::Eval {
            common,
            checkpoint,
            trace_rows,
        } => {
            let points = common.points()?;
            if checkpoint.is_some() && points.len() > 1 {
                return Err(Error::InvalidConfig(
                    "--checkpoint cannot be combined with a sweep; checkpoints are read from each point directory".into(),
                ));
            }
            let swept = points.len() > 1;
            for (label, cfg, dir) in points {
                print_label(&mut stdout, &label)?;
                let ckpt = match &checkpoint {
                    Some(p) => Some(p.clone()),
                    None if swept => Some(dir.join(CHECKPOINT)).filter(|p| p.exists()),
                    None => None,
                };
                cmd_eval(&cfg, ckpt.as_deref(), &dir, trace_rows, &mut stdout)?;
            }
        }
        Command::Bench {
            checkpoint,
            iterations,
        } => {
            cmd_bench(&checkpoint, iterations, &mut stdout)?;
        }
    }
    Ok(())
}

fn print_label(out: &mut impl Write, label: &str) -> Result<()> {
    if !label.is_empty() {
        writeln!(out, "# {label}")?;
    }
    Ok(())
}

/// Writes both populations, the metric map and the training trace into
/// `out`, then prints generation statistics.
pub fn cmd_generate(cfg: &ScenarioConfig, out: &Path, log: &mut impl Write) -> Result<Prepared> {
    fs::create_dir_all(out)?;
    let prep = scenario::prepare(cfg)?;
    prep.train_pop.write(&out.join(TRAIN_POPULATION))?;
    prep.test_pop.write(&out.join(TEST_POPULATION))?;
    prep.map.write(&out.join(METRIC_MAP))?;
    let trace = scenario::training_trace(cfg, &prep)?;
    write_trace(&trace, &out.join(TRAIN_TRACE))?;
    let stats = TraceStats::of(&trace);
    writeln!(log, "population_mean_reward={:?}", prep.train_pop.mean_reward())?;
    writeln!(log, "lambda={:?}", prep.map.lambda())?;
    writeln!(log, "trace_length={}", trace.len())?;
    writeln!(log, "trace_mean_reward={:?}", stats.mean_reward)?;
    writeln!(log, "trace_reward_se={:?}", stats.reward_se)?;
    writeln!(log, "trace_mean_gap={:?}", stats.mean_gap)?;
    writeln!(log, "trace_mean_metric={:?}", stats.mean_metric)?;
    Ok(prep)
}

#[derive(Debug, Clone, Copy)]
pub struct TraceStats {
    pub mean_reward: f64,
    /// Naive standard error of the mean reward.
    pub reward_se: f64,
    pub mean_gap: f64,
    pub mean_metric: f64,
}

impl TraceStats {
    pub fn of(trace: &[TraceEntry]) -> Self {
        let rewards: Vec<f64> = trace.iter().map(|e| e.reward as f64).collect();
        let (mean_reward, sd) = mean_std(&rewards);
        let n = trace.len() as f64;
        Self {
            mean_reward,
            reward_se: sd / n.sqrt(),
            mean_gap: trace.iter().map(|e| e.gap as f64).sum::<f64>() / n,
            mean_metric: trace.iter().map(|e| e.metric).sum::<f64>() / n,
        }
    }
}

/// Trains on `trace` and writes the checkpoint and per-sync loss curve.
pub fn cmd_train(cfg: &ScenarioConfig, trace: &Path, out: &Path, log: &mut impl Write) -> Result<QNetwork> {
    if !trace.exists() {
        return Err(Error::MissingArtifact(trace.to_path_buf()));
    }
    let entries = read_trace(trace)?;
    fs::create_dir_all(out)?;
    let tcfg = cfg.trainer(scenario::trainer_seed(cfg));
    let total = tcfg.sync_count;
    let mut lines = Vec::new();
    let outcome = train_with(&entries, cfg.params()?, &tcfg, Execution::default(), |sync, loss| {
        eprintln!("sync {}/{} loss={loss:.6e}", sync + 1, total);
        lines.push(format!("{sync},{loss:?}"));
    })?;
    outcome.net.save(&out.join(CHECKPOINT))?;
    let mut curve = String::from("sync,loss\n");
    for l in lines {
        curve.push_str(&l);
        curve.push('\n');
    }
    fs::write(out.join(LOSS_CURVE), curve)?;
    writeln!(log, "checkpoint={}", out.join(CHECKPOINT).display())?;
    writeln!(log, "parameters={}", outcome.net.num_parameters())?;
    Ok(outcome.net)
}

/// Compares the benchmark policies (plus the DQN when a checkpoint is
/// given) over the configured seeds and writes the summary and per-policy
/// decision traces for the first seed.
pub fn cmd_eval(
    cfg: &ScenarioConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    trace_rows: usize,
    log: &mut impl Write,
) -> Result<sim_eval::Summary> {
    let prep = scenario::prepare(cfg)?;
    let mut policies = scenario::benchmark_policies(cfg, &prep)?;
    if let Some(path) = checkpoint {
        let net = QNetwork::load(path)?;
        policies.push(("dqn".to_string(), Policy::Dqn(Box::new(net))));
    }
    let summary = sim_eval::compare(&policies, &cfg.eval.seeds, prep.params, cfg.gamma, |seed| {
        scenario::test_trace(cfg, &prep, seed)
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join(SUMMARY_TABLE), summary.table())?;
    fs::write(out.join(SUMMARY_KV), summary.key_values())?;
    let first = scenario::test_trace(cfg, &prep, cfg.eval.seeds[0])?;
    let head = &first[..trace_rows.min(first.len())];
    if !head.is_empty() {
        for (name, policy) in &policies {
            let episode = sim_eval::run(policy, head, prep.params, cfg.gamma)?;
            sim_eval::emit_trace(&episode, &out.join(format!("decisions_{name}.csv")))?;
        }
    }
    write!(log, "{}", summary.table())?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations: usize,
}

/// Times `iterations` single-history forward passes on random probes.
pub fn forward_latency(net: &QNetwork, iterations: usize) -> Result<Latency> {
    let arch = net.architecture();
    let mut rng = rng_for(0, 7);
    let probe = HistoryWindow {
        gaps: (0..arch.window - 1).map(|_| rng.random_range(1..4)).collect(),
        metrics: (0..arch.window - 1).map(|_| rng.random::<f64>()).collect(),
    };
    let mut times = Vec::with_capacity(iterations);
    let mut sink = 0.0;
    for _ in 0..iterations {
        let start = Instant::now();
        let q = net.forward(&probe)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        sink += q[0];
    }
    std::hint::black_box(sink);
    if times.is_empty() {
        return Ok(Latency {
            mean_ms: 0.0,
            std_ms: 0.0,
            iterations,
        });
    }
    let (mean_ms, std_ms) = mean_std(&times);
    Ok(Latency {
        mean_ms,
        std_ms,
        iterations,
    })
}

pub fn cmd_bench(checkpoint: &Path, iterations: usize, log: &mut impl Write) -> Result<Latency> {
    if !checkpoint.exists() {
        return Err(Error::MissingArtifact(checkpoint.to_path_buf()));
    }
    let net = QNetwork::load(checkpoint)?;
    let lat = forward_latency(&net, iterations)?;
    writeln!(log, "iterations={}", lat.iterations)?;
    writeln!(log, "mean_ms={:.6}", lat.mean_ms)?;
    writeln!(log, "std_ms={:.6}", lat.std_ms)?;
    Ok(lat)
}

/// One-line machine-parsable error report.
pub fn error_line(err: &Error) -> String {
    format!("error: kind={} msg={}", err.kind(), err.to_string().replace('\n', " "))
}
