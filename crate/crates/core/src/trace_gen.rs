//! Synthetic image populations and arrival/selection sequence generators.
//!
//! A population stands in for a labelled image set: each sample carries the
//! weak classifier's output entropy and the 0/1 top-k losses of both
//! classifiers. Traces are produced by zipping a two-state Markov-modulated
//! arrival process with a rank-ordered correlated sampler over the population.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_map::MetricMap;

const POPULATION_STREAM: u64 = 0;
const ARRIVAL_STREAM: u64 = 1;
const SELECTION_STREAM: u64 = 2;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two-state Markov-modulated arrivals: state `i` emits gaps of `i_i` slots
/// and leaves after each arrival with probability `tprob_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalConfig {
    pub i1: u32,
    pub i2: u32,
    pub tprob1: f64,
    pub tprob2: f64,
}

impl ArrivalConfig {
    pub fn periodic(gap: u32) -> Self {
        Self {
            i1: gap,
            i2: gap,
            tprob1: 1.0,
            tprob2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.i1 == 0 || self.i2 == 0 {
            return Err(Error::InvalidConfig("inter-arrival times must be >= 1".into()));
        }
        for p in [self.tprob1, self.tprob2] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "transition probability {p} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Long-run fraction of arrivals emitted in state 2.
    pub fn state2_fraction(&self) -> f64 {
        self.tprob1 / (self.tprob1 + self.tprob2)
    }

    /// Stationary arrival rate in images per slot.
    pub fn stationary_rate(&self) -> f64 {
        let p2 = self.state2_fraction();
        1.0 / ((1.0 - p2) * self.i1 as f64 + p2 * self.i2 as f64)
    }
}

/// Rank-ordered sampler settings: spread `sp` (fraction of the population)
/// and location reset probability `rprob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub sp: f64,
    pub rprob: f64,
}

impl SelectionConfig {
    pub fn iid() -> Self {
        Self { sp: 1.0, rprob: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sp) {
            return Err(Error::InvalidConfig(format!("spread {} outside [0, 1]", self.sp)));
        }
        if !(0.0..=1.0).contains(&self.rprob) {
            return Err(Error::InvalidConfig(format!(
                "reset probability {} outside [0, 1]",
                self.rprob
            )));
        }
        Ok(())
    }
}

/// Log-normal entropy law, parameterised by its median and log-space sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalSpec {
    pub median: f64,
    pub sigma: f64,
}

impl LogNormalSpec {
    fn distribution(&self) -> Result<LogNormal<f64>> {
        if self.median.is_nan() || self.median <= 0.0 {
            return Err(Error::InvalidConfig("log-normal median must be positive".into()));
        }
        LogNormal::new(self.median.ln(), self.sigma)
            .map_err(|e| Error::InvalidConfig(format!("log-normal: {e}")))
    }
}

/// Per-category entropy laws. Entropies are capped at `ln(classes)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyModel {
    pub classes: u32,
    pub both_correct: LogNormalSpec,
    pub both_wrong: LogNormalSpec,
    pub strong_only: LogNormalSpec,
}

impl Default for EntropyModel {
    fn default() -> Self {
        Self {
            classes: 1000,
            both_correct: LogNormalSpec {
                median: 0.6,
                sigma: 0.8,
            },
            both_wrong: LogNormalSpec {
                median: 3.2,
                sigma: 0.35,
            },
            strong_only: LogNormalSpec {
                median: 2.4,
                sigma: 0.45,
            },
        }
    }
}

impl EntropyModel {
    pub fn max_entropy(&self) -> f64 {
        (self.classes as f64).ln()
    }
}

/// Which classifiers get a sample right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    BothCorrect,
    BothWrong,
    StrongOnly,
}

impl Category {
    fn losses(self) -> (u8, u8) {
        match self {
            Category::BothCorrect => (0, 0),
            Category::BothWrong => (1, 1),
            Category::StrongOnly => (1, 0),
        }
    }
}

/// One synthetic image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSample {
    pub entropy: f64,
    pub weak_loss: u8,
    pub strong_loss: u8,
    /// `weak_loss - strong_loss`.
    pub reward: i8,
    pub rank: usize,
}

impl PopulationSample {
    pub fn new(entropy: f64, weak_loss: u8, strong_loss: u8, rank: usize) -> Self {
        Self {
            entropy,
            weak_loss,
            strong_loss,
            reward: weak_loss as i8 - strong_loss as i8,
            rank,
        }
    }
}

/// Category fractions for (both correct, both wrong, strong only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryFractions {
    pub both_correct: f64,
    pub both_wrong: f64,
    pub strong_only: f64,
}

/// Samples kept in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    samples: Vec<PopulationSample>,
    fractions: CategoryFractions,
}

impl SyntheticPopulation {
    /// Builds a population with exactly `round(frac * size)` samples in the
    /// first two categories and the remainder in the third, ordered by
    /// ascending entropy.
    pub fn build(
        size: usize,
        fractions: CategoryFractions,
        model: &EntropyModel,
        seed: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Empty("population size"));
        }
        let f = fractions;
        let all = [f.both_correct, f.both_wrong, f.strong_only];
        if all.iter().any(|x| !(0.0..=1.0).contains(x)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "category fractions {all:?} must be in [0, 1] and sum to 1"
            )));
        }
        let n_a = ((f.both_correct * size as f64).round() as usize).min(size);
        let n_b = ((f.both_wrong * size as f64).round() as usize).min(size - n_a);
        let n_c = size - n_a - n_b;
        let mut rng = rng_for(seed, POPULATION_STREAM);
        let max_h = model.max_entropy();
        let mut samples = Vec::with_capacity(size);
        for (cat, count, spec) in [
            (Category::BothCorrect, n_a, model.both_correct),
            (Category::BothWrong, n_b, model.both_wrong),
            (Category::StrongOnly, n_c, model.strong_only),
        ] {
            let dist = spec.distribution()?;
            let (w, s) = cat.losses();
            for _ in 0..count {
                let h = dist.sample(&mut rng).min(max_h);
                samples.push(PopulationSample::new(h, w, s, 0));
            }
        }
        samples.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
        let fractions = CategoryFractions {
            both_correct: n_a as f64 / size as f64,
            both_wrong: n_b as f64 / size as f64,
            strong_only: n_c as f64 / size as f64,
        };
        let mut pop = Self { samples, fractions };
        pop.renumber();
        Ok(pop)
    }

    /// Wraps samples that are already in rank order.
    pub fn from_samples(samples: Vec<PopulationSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("population"));
        }
        let n = samples.len() as f64;
        let count = |w: u8, s: u8| {
            samples
                .iter()
                .filter(|x| x.weak_loss == w && x.strong_loss == s)
                .count() as f64
                / n
        };
        let fractions = CategoryFractions {
            both_correct: count(0, 0),
            both_wrong: count(1, 1),
            strong_only: 1.0 - count(0, 0) - count(1, 1),
        };
        let mut pop = Self { samples, fractions };
        pop.renumber();
        Ok(pop)
    }

    fn renumber(&mut self) {
        for (i, s) in self.samples.iter_mut().enumerate() {
            s.rank = i;
        }
    }

    /// Re-sorts samples by ascending offloading metric (stable, so equal
    /// metrics keep their entropy order) and renumbers ranks.
    pub fn rank_by_metric(mut self, map: &MetricMap) -> Self {
        let mut keyed: Vec<(f64, PopulationSample)> = self
            .samples
            .iter()
            .map(|s| (map.metric(s.entropy), *s))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.samples = keyed.into_iter().map(|(_, s)| s).collect();
        self.renumber();
        self
    }

    pub fn samples(&self) -> &[PopulationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fractions(&self) -> CategoryFractions {
        self.fractions
    }

    pub fn mean_reward(&self) -> f64 {
        self.samples.iter().map(|s| s.reward as f64).sum::<f64>() / self.len() as f64
    }

    /// `(entropy, reward)` pairs for fitting a metric map.
    pub fn anchors(&self) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .map(|s| (s.entropy, s.reward as f64))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "rank,entropy,weak_loss,strong_loss,reward")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{:.16e},{},{},{}",
                s.rank, s.entropy, s.weak_loss, s.strong_loss, s.reward
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let bad = |line: usize, msg: &str| Error::Parse {
            what: "population",
            line,
            msg: msg.to_string(),
        };
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "rank,entropy,weak_loss,strong_loss,reward" {
                    return Err(bad(1, "unexpected header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad(i + 1, "expected 5 columns"));
            }
            let entropy = cols[1].parse().map_err(|_| bad(i + 1, "bad entropy"))?;
            let w = cols[2].parse().map_err(|_| bad(i + 1, "bad weak_loss"))?;
            let s = cols[3].parse().map_err(|_| bad(i + 1, "bad strong_loss"))?;
            samples.push(PopulationSample::new(entropy, w, s, 0));
        }
        Self::from_samples(samples)
    }
}

/// Infinite stream of inter-arrival gaps.
#[derive(Debug, Clone)]
pub struct ArrivalProcess {
    cfg: ArrivalConfig,
    in_state2: bool,
    rng: ChaCha8Rng,
}

impl ArrivalProcess {
    /// Starts in state 1.
    pub fn new(cfg: ArrivalConfig, seed: u64) -> Self {
        Self {
            cfg,
            in_state2: false,
            rng: rng_for(seed, ARRIVAL_STREAM),
        }
    }

    pub fn in_state2(&self) -> bool {
        self.in_state2
    }
}

impl Iterator for ArrivalProcess {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        let (gap, leave) = if self.in_state2 {
            (self.cfg.i2, self.cfg.tprob2)
        } else {
            (self.cfg.i1, self.cfg.tprob1)
        };
        if self.rng.random::<f64>() < leave {
            self.in_state2 = !self.in_state2;
        }
        Some(gap)
    }
}

/// Infinite stream of correlated draws from a rank-ordered population.
#[derive(Debug, Clone)]
pub struct SelectionProcess<'a> {
    pop: &'a SyntheticPopulation,
    cfg: SelectionConfig,
    location: f64,
    rng: ChaCha8Rng,
}

impl<'a> SelectionProcess<'a> {
    pub fn new(pop: &'a SyntheticPopulation, cfg: SelectionConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, SELECTION_STREAM);
        let location = rng.random::<f64>() * (1.0 - cfg.sp);
        Self {
            pop,
            cfg,
            location,
            rng,
        }
    }

    fn window(&self) -> (usize, usize) {
        let n = self.pop.len();
        let lo = ((self.location * n as f64).floor() as usize).min(n - 1);
        let hi = (((self.location + self.cfg.sp) * n as f64).floor() as usize).min(n);
        (lo, hi.max(lo + 1))
    }
}

impl<'a> Iterator for SelectionProcess<'a> {
    type Item = &'a PopulationSample;

    fn next(&mut self) -> Option<&'a PopulationSample> {
        if self.rng.random::<f64>() < self.cfg.rprob {
            self.location = self.rng.random::<f64>() * (1.0 - self.cfg.sp);
        }
        let (lo, hi) = self.window();
        let idx = if hi - lo == 1 {
            lo
        } else {
            self.rng.random_range(lo..hi)
        };
        Some(&self.pop.samples()[idx])
    }
}

/// One arrival in a trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Slots since the previous arrival (at least 1).
    pub gap: u32,
    pub metric: f64,
    pub reward: i8,
    pub weak_loss: u8,
}

impl TraceEntry {
    pub fn strong_loss(&self) -> u8 {
        (self.weak_loss as i8 - self.reward) as u8
    }
}

/// Zips the arrival and selection streams into `length` trace entries.
pub fn generate_trace(
    pop: &SyntheticPopulation,
    arrival: ArrivalConfig,
    selection: SelectionConfig,
    length: usize,
    map: &MetricMap,
    seed: u64,
) -> Result<Vec<TraceEntry>> {
    arrival.validate()?;
    selection.validate()?;
    if pop.is_empty() {
        return Err(Error::Empty("population"));
    }
    let gaps = ArrivalProcess::new(arrival, seed);
    let draws = SelectionProcess::new(pop, selection, seed);
    Ok(gaps
        .zip(draws)
        .take(length)
        .map(|(gap, s)| TraceEntry {
            gap,
            metric: map.metric(s.entropy),
            reward: s.reward,
            weak_loss: s.weak_loss,
        })
        .collect())
}

pub const TRACE_HEADER: &str = "gap,metric,reward,weak_loss";

pub fn write_trace(trace: &[TraceEntry], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{TRACE_HEADER}")?;
    for e in trace {
        writeln!(out, "{},{:.16e},{},{}", e.gap, e.metric, e.reward, e.weak_loss)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        what: "trace",
        line,
        msg: msg.to_string(),
    };
    let mut trace = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut col = |name: &str| cols.next().ok_or_else(|| bad(i + 1, &format!("missing {name}")));
        let gap: u32 = col("gap")?.parse().map_err(|_| bad(i + 1, "bad gap"))?;
        let metric: f64 = col("metric")?.parse().map_err(|_| bad(i + 1, "bad metric"))?;
        let reward: i8 = col("reward")?.parse().map_err(|_| bad(i + 1, "bad reward"))?;
        let weak_loss: u8 = col("weak_loss")?.parse().map_err(|_| bad(i + 1, "bad weak_loss"))?;
        if gap == 0 {
            return Err(bad(i + 1, "gap must be >= 1"));
        }
        trace.push(TraceEntry {
            gap,
            metric,
            reward,
            weak_loss,
        });
    }
    Ok(trace)
}
