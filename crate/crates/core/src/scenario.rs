//! End-to-end scenario plumbing shared by the CLI and the experiments:
//! populations, metric map, traces and the benchmark policies.

use crate::config::{mix_seed, ScenarioConfig};
use crate::error::Result;
use crate::metric_map::{median_heuristic_lambda, MetricMap};
use crate::policies::{quantile_of, solve_mdp, MetricDistribution, MdpPolicy, Policy};
use crate::token_bucket::BucketParams;
use crate::trace_gen::{generate_trace, SyntheticPopulation, TraceEntry};

const TRAIN_POP: u64 = 1;
const TEST_POP: u64 = 2;
const TRAIN_TRACE: u64 = 3;
const TRAINER: u64 = 4;
const LAMBDA: u64 = 5;
const TEST_TRACE: u64 = 1000;
const REFERENCE_LENGTH: usize = 1_000_000;

/// Populations (ranked by metric) and the metric map fitted on the
/// training population.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub params: BucketParams,
    pub train_pop: SyntheticPopulation,
    pub test_pop: SyntheticPopulation,
    pub map: MetricMap,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    cfg.validate()?;
    let pop = &cfg.population;
    let train = SyntheticPopulation::build(
        pop.train_size,
        pop.fractions,
        &pop.entropy,
        mix_seed(cfg.seed, TRAIN_POP),
    )?;
    let test = SyntheticPopulation::build(
        pop.test_size,
        pop.fractions,
        &pop.entropy,
        mix_seed(cfg.seed, TEST_POP),
    )?;
    let lambda = match pop.lambda {
        Some(l) => l,
        None => {
            let hs: Vec<f64> = train.samples().iter().map(|s| s.entropy).collect();
            median_heuristic_lambda(&hs, pop.lambda_subsample, mix_seed(cfg.seed, LAMBDA))?
        }
    };
    let map = MetricMap::fit(&train.anchors(), lambda)?.with_grid(pop.entropy.max_entropy());
    Ok(Prepared {
        params: cfg.params()?,
        train_pop: train.rank_by_metric(&map),
        test_pop: test.rank_by_metric(&map),
        map,
    })
}

impl Prepared {
    pub fn train_metrics(&self) -> Vec<f64> {
        self.train_pop
            .samples()
            .iter()
            .map(|s| self.map.metric(s.entropy))
            .collect()
    }
}

pub fn training_trace(cfg: &ScenarioConfig, prep: &Prepared) -> Result<Vec<TraceEntry>> {
    generate_trace(
        &prep.train_pop,
        cfg.arrival,
        cfg.selection,
        cfg.eval.train_length,
        &prep.map,
        mix_seed(cfg.seed, TRAIN_TRACE),
    )
}

pub fn test_trace(cfg: &ScenarioConfig, prep: &Prepared, eval_seed: u64) -> Result<Vec<TraceEntry>> {
    generate_trace(
        &prep.test_pop,
        cfg.arrival,
        cfg.selection,
        cfg.eval.test_length,
        &prep.map,
        mix_seed(cfg.seed, TEST_TRACE + eval_seed),
    )
}

pub fn trainer_seed(cfg: &ScenarioConfig) -> u64 {
    mix_seed(cfg.seed, TRAINER)
}

/// Fraction of images the token rate allows to be offloaded in the long
/// run, given the configured arrival rate.
pub fn offload_fraction(cfg: &ScenarioConfig, params: BucketParams) -> f64 {
    (params.rate() / cfg.arrival.stationary_rate()).min(1.0)
}

/// Metrics as they occur in the training sequence. Under correlated
/// selection this marginal differs from the population's, and it is the
/// one the device observes.
pub fn reference_metrics(cfg: &ScenarioConfig, prep: &Prepared) -> Result<Vec<f64>> {
    let mut short = cfg.clone();
    short.eval.train_length = cfg.eval.train_length.min(REFERENCE_LENGTH);
    Ok(training_trace(&short, prep)?.iter().map(|e| e.metric).collect())
}

pub fn mdp_policy(cfg: &ScenarioConfig, prep: &Prepared, metrics: &[f64]) -> Result<MdpPolicy> {
    let dist = MetricDistribution::equal_mass(metrics, cfg.population.mdp_bins)?;
    solve_mdp(&dist, cfg.arrival.stationary_rate(), prep.params, cfg.gamma)
}

/// Lower bound, Baseline and MDP, in that order, calibrated on the
/// training sequence's metric distribution.
pub fn benchmark_policies(cfg: &ScenarioConfig, prep: &Prepared) -> Result<Vec<(String, Policy)>> {
    let metrics = reference_metrics(cfg, prep)?;
    let threshold = quantile_of(&metrics, offload_fraction(cfg, prep.params))?;
    Ok(vec![
        ("lower_bound".to_string(), Policy::lower_bound(threshold)),
        ("baseline".to_string(), Policy::baseline(threshold)),
        ("mdp".to_string(), Policy::Mdp(mdp_policy(cfg, prep, &metrics)?)),
    ])
}
