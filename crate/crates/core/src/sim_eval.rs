//! Episode simulation with token-bucket accounting, multi-seed comparison
//! and decision-trace export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dqn::{greedy_action, HistoryWindow, QNetwork, ReplayBuffer};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::policies::{DecisionContext, Policy};
use crate::token_bucket::{BucketParams, BucketState};
use crate::trace_gen::TraceEntry;

/// Arrivals scored per batched network pass.
const Q_CHUNK: usize = 4096;

pub const DECISION_HEADER: &str = "t,metric,n_bar_before,action,reward";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    /// Slot of the arrival, counted from the first one.
    pub t: u64,
    pub metric: f64,
    pub n_bar_before: u64,
    pub action: bool,
    pub reward: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub policy: String,
    pub length: usize,
    pub avg_loss: f64,
    pub discounted_reward: f64,
    pub offload_count: usize,
    pub conformance_ok: bool,
    /// Empty unless the episode was run with logging.
    pub log: Vec<DecisionRecord>,
}

/// Runs `policy` over `trace` starting from a full bucket and keeps the
/// per-arrival decision log.
pub fn run(policy: &Policy, trace: &[TraceEntry], params: BucketParams, gamma: f64) -> Result<EpisodeResult> {
    simulate(policy, trace, params, gamma, true)
}

/// Like [`run`] without the decision log.
pub fn evaluate(policy: &Policy, trace: &[TraceEntry], params: BucketParams, gamma: f64) -> Result<EpisodeResult> {
    simulate(policy, trace, params, gamma, false)
}

enum Decider<'a> {
    Metric(&'a Policy),
    Network {
        net: &'a QNetwork,
        buffer: ReplayBuffer<'a>,
        q: ndarray::Array2<f64>,
        start: usize,
    },
}

impl Decider<'_> {
    fn decide(&mut self, i: usize, trace: &[TraceEntry], bucket: BucketState, params: BucketParams) -> Result<bool> {
        match self {
            Decider::Metric(policy) => {
                let empty = HistoryWindow {
                    gaps: Vec::new(),
                    metrics: Vec::new(),
                };
                let ctx = DecisionContext {
                    history: &empty,
                    bucket,
                    params,
                    current_metric: trace[i].metric,
                    current_gap: trace[i].gap,
                };
                Ok(policy.decide(&ctx)?.offload)
            }
            Decider::Network { net, buffer, q, start } => {
                if i >= *start + q.nrows() || i < *start {
                    let end = (i + Q_CHUNK).min(trace.len());
                    *q = net.forward_batch(buffer.inputs(i..end).view());
                    *start = i;
                }
                let row = q.row(i - *start);
                Ok(greedy_action(
                    &net.layout(),
                    row.as_slice().expect("standard layout"),
                    bucket,
                ))
            }
        }
    }
}

fn simulate(
    policy: &Policy,
    trace: &[TraceEntry],
    params: BucketParams,
    gamma: f64,
    keep_log: bool,
) -> Result<EpisodeResult> {
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let mut decider = match policy {
        Policy::Dqn(net) => {
            if net.params() != params {
                return Err(Error::InvalidConfig(format!(
                    "network trained for {:?}, bucket is {:?}",
                    net.params(),
                    params
                )));
            }
            Decider::Network {
                net,
                buffer: ReplayBuffer::padded(trace, net.architecture())?,
                q: ndarray::Array2::zeros((0, 0)),
                start: 0,
            }
        }
        _ => Decider::Metric(policy),
    };
    let respects = policy.respects_bucket();
    let mut n_bar = params.capacity;
    let mut shadow = params.capacity;
    let mut conformance_ok = true;
    let mut t = 0u64;
    let mut discount = 1.0;
    let mut loss_sum = 0u64;
    let mut offloaded_reward = 0i64;
    let mut discounted = 0.0;
    let mut offloads = 0;
    let mut log = Vec::with_capacity(if keep_log { trace.len() } else { 0 });
    for (i, e) in trace.iter().enumerate() {
        if i > 0 {
            t += e.gap as u64;
            discount *= gamma.powi(e.gap as i32);
        }
        n_bar = (n_bar + params.fill * e.gap as u64).min(params.capacity);
        shadow = (shadow + params.fill * e.gap as u64).min(params.capacity);
        let offload = decider.decide(i, trace, BucketState(n_bar), params)?;
        if keep_log {
            log.push(DecisionRecord {
                t,
                metric: e.metric,
                n_bar_before: n_bar,
                action: offload,
                reward: e.reward,
            });
        }
        if offload {
            if shadow >= params.cost {
                shadow -= params.cost;
            } else {
                conformance_ok = false;
            }
            if respects {
                if n_bar < params.cost {
                    return Err(Error::PolicyViolation { index: i, n_bar });
                }
                n_bar -= params.cost;
            }
            offloads += 1;
            offloaded_reward += e.reward as i64;
            discounted += discount * e.reward as f64;
        }
        loss_sum += e.weak_loss as u64;
    }
    let n = trace.len() as f64;
    Ok(EpisodeResult {
        policy: policy.name().to_string(),
        length: trace.len(),
        avg_loss: (loss_sum as f64 - offloaded_reward as f64) / n,
        discounted_reward: discounted,
        offload_count: offloads,
        conformance_ok,
        log,
    })
}

/// Replays a decision log through a fresh bucket and checks that every
/// logged count is reproduced and every offload had tokens.
pub fn replay_conforms(log: &[DecisionRecord], params: BucketParams) -> bool {
    let mut state = params.full();
    let mut prev: Option<&DecisionRecord> = None;
    for rec in log {
        if let Some(p) = prev {
            match params.advance(state, p.action, rec.t - p.t) {
                Ok(s) => state = s,
                Err(_) => return false,
            }
        }
        if state.0 != rec.n_bar_before {
            return false;
        }
        prev = Some(rec);
    }
    match prev {
        Some(p) => !p.action || params.can_offload(state),
        None => true,
    }
}

pub fn emit_trace(result: &EpisodeResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{DECISION_HEADER}")?;
    for r in &result.log {
        writeln!(
            w,
            "{},{:.17e},{},{},{}",
            r.t, r.metric, r.n_bar_before, r.action as u8, r.reward
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_decision_trace(path: &Path) -> Result<Vec<DecisionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        what: "decision trace",
        line,
        msg,
    };
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if k == 0 {
            if line.trim() != DECISION_HEADER {
                return Err(parse_err(1, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(k + 1, format!("expected 5 fields, got {}", f.len())));
        }
        let e = |m: &dyn std::fmt::Display| parse_err(k + 1, m.to_string());
        out.push(DecisionRecord {
            t: f[0].parse().map_err(|x| e(&x))?,
            metric: f[1].parse().map_err(|x| e(&x))?,
            n_bar_before: f[2].parse().map_err(|x| e(&x))?,
            action: match f[3] {
                "0" => false,
                "1" => true,
                other => return Err(e(&format!("bad action {other:?}"))),
            },
            reward: f[4].parse().map_err(|x| e(&x))?,
        });
    }
    Ok(out)
}

/// Mean and dispersion of the paired differences `a_i - b_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Standard error of the mean difference.
    pub se: f64,
}

impl PairedStats {
    pub fn new(a: &[f64], b: &[f64]) -> Self {
        assert_eq!(a.len(), b.len(), "paired samples must have equal length");
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (mean, sd) = mean_std(&d);
        let n = d.len();
        Self {
            n,
            mean,
            sd,
            se: if n > 0 { sd / (n as f64).sqrt() } else { f64::NAN },
        }
    }

    /// `a` is below `b` by more than `sigmas` standard errors.
    pub fn below(&self, sigmas: f64) -> bool {
        self.mean < 0.0 && -self.mean > sigmas * self.se
    }
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub name: String,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_discounted_reward: f64,
    pub offload_rate: f64,
    /// Per-seed average losses in seed order.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub rows: Vec<PolicySummary>,
}

impl Summary {
    pub fn row(&self, name: &str) -> Option<&PolicySummary> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10} {:>12} {:>10}",
            "policy", "mean_loss", "std_loss", "disc_reward", "offload"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>10.6} {:>10.6} {:>12.4} {:>10.6}",
                r.name, r.mean_loss, r.std_loss, r.mean_discounted_reward, r.offload_rate
            );
        }
        s
    }

    /// One `key=value` per line, floats printed to full precision.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds={}", seeds.join(","));
        for r in &self.rows {
            let p = &r.name;
            let _ = writeln!(s, "{p}.mean_loss={:?}", r.mean_loss);
            let _ = writeln!(s, "{p}.std_loss={:?}", r.std_loss);
            let _ = writeln!(s, "{p}.mean_discounted_reward={:?}", r.mean_discounted_reward);
            let _ = writeln!(s, "{p}.offload_rate={:?}", r.offload_rate);
            let losses: Vec<String> = r.losses.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{p}.losses={}", losses.join(","));
        }
        s
    }
}

pub fn compare<F>(
    policies: &[(String, Policy)],
    seeds: &[u64],
    params: BucketParams,
    gamma: f64,
    make_trace: F,
) -> Result<Summary>
where
    F: Fn(u64) -> Result<Vec<TraceEntry>> + Sync + Send,
{
    compare_with(Execution::default(), policies, seeds, params, gamma, make_trace)
}

/// Evaluates every policy on the same freshly generated trace per seed.
/// Seeds run in parallel under `exec`; results are merged in seed order.
pub fn compare_with<F>(
    exec: Execution,
    policies: &[(String, Policy)],
    seeds: &[u64],
    params: BucketParams,
    gamma: f64,
    make_trace: F,
) -> Result<Summary>
where
    F: Fn(u64) -> Result<Vec<TraceEntry>> + Sync + Send,
{
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let per_seed = exec.map(seeds, |&seed| -> Result<Vec<EpisodeResult>> {
        let trace = make_trace(seed)?;
        policies
            .iter()
            .map(|(_, p)| evaluate(p, &trace, params, gamma))
            .collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = policies
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let eps: Vec<&EpisodeResult> = per_seed.iter().map(|r| &r[k]).collect();
            let losses: Vec<f64> = eps.iter().map(|e| e.avg_loss).collect();
            let (mean_loss, std_loss) = mean_std(&losses);
            let disc: Vec<f64> = eps.iter().map(|e| e.discounted_reward).collect();
            let offload_rate = eps.iter().map(|e| e.offload_count as f64 / e.length as f64).sum::<f64>()
                / eps.len() as f64;
            PolicySummary {
                name: name.clone(),
                mean_loss,
                std_loss,
                mean_discounted_reward: mean_std(&disc).0,
                offload_rate,
                losses,
            }
        })
        .collect();
    Ok(Summary {
        seeds: seeds.to_vec(),
        rows,
    })
}
