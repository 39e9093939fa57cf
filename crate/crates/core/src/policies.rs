//! Offloading policies: threshold rules, the token-state MDP and the DQN
//! adapter.

use serde::{Deserialize, Serialize};

use crate::dqn::{self, HistoryWindow, QNetwork};
use crate::error::{Error, Result};
use crate::metric_map::MetricMap;
use crate::token_bucket::{BucketParams, BucketState};
use crate::trace_gen::SyntheticPopulation;

const MDP_TOLERANCE: f64 = 1e-9;
const MDP_MAX_SWEEPS: usize = 1_000_000;
const MAX_RATE_DENOMINATOR: u64 = 64;
pub const MAX_BINS: usize = 1024;

/// Everything a policy may look at when an image arrives.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    /// Last `T - 1` (gap, metric) pairs, ending with the current image.
    pub history: &'a HistoryWindow,
    pub bucket: BucketState,
    pub params: BucketParams,
    pub current_metric: f64,
    pub current_gap: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub offload: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: f64,
    pub respects_bucket: bool,
}

impl ThresholdPolicy {
    pub fn decide_metric(&self, metric: f64, bucket: BucketState, params: &BucketParams) -> bool {
        metric >= self.threshold && (!self.respects_bucket || params.can_offload(bucket))
    }
}

/// Per-token-state metric cutoffs from value iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpPolicy {
    /// `thresholds[k]` applies at `n_bar = P + k`.
    pub thresholds: Vec<f64>,
    pub assumed_rate: f64,
    pub gamma: f64,
    pub params: BucketParams,
}

impl MdpPolicy {
    pub fn threshold(&self, n_bar: BucketState) -> Option<f64> {
        let k = n_bar.0.checked_sub(self.params.cost)?;
        self.thresholds.get(k as usize).copied()
    }

    pub fn decide_metric(&self, metric: f64, bucket: BucketState) -> bool {
        self.threshold(bucket).is_some_and(|t| metric >= t)
    }
}

#[derive(Debug, Clone)]
pub enum Policy {
    /// Threshold rule that ignores the bucket.
    LowerBound(ThresholdPolicy),
    Baseline(ThresholdPolicy),
    Mdp(MdpPolicy),
    Dqn(Box<QNetwork>),
}

impl Policy {
    pub fn lower_bound(threshold: f64) -> Self {
        Policy::LowerBound(ThresholdPolicy {
            threshold,
            respects_bucket: false,
        })
    }

    pub fn baseline(threshold: f64) -> Self {
        Policy::Baseline(ThresholdPolicy {
            threshold,
            respects_bucket: true,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::LowerBound(_) => "lower_bound",
            Policy::Baseline(_) => "baseline",
            Policy::Mdp(_) => "mdp",
            Policy::Dqn(_) => "dqn",
        }
    }

    pub fn respects_bucket(&self) -> bool {
        !matches!(self, Policy::LowerBound(_))
    }

    /// History window length the policy reads, if any.
    pub fn window(&self) -> Option<usize> {
        match self {
            Policy::Dqn(net) => Some(net.architecture().window),
            _ => None,
        }
    }

    pub fn decide(&self, ctx: &DecisionContext<'_>) -> Result<Decision> {
        let offload = match self {
            Policy::LowerBound(p) | Policy::Baseline(p) => {
                p.decide_metric(ctx.current_metric, ctx.bucket, &ctx.params)
            }
            Policy::Mdp(p) => p.decide_metric(ctx.current_metric, ctx.bucket),
            Policy::Dqn(net) => {
                if net.params() != ctx.params {
                    return Err(Error::InvalidConfig(format!(
                        "network trained for {:?}, bucket is {:?}",
                        net.params(),
                        ctx.params
                    )));
                }
                dqn::act(net, ctx.history, ctx.bucket)?
            }
        };
        Ok(Decision { offload })
    }
}

/// `(1 - r)`-quantile of the population's metrics: offloading at or above
/// it selects a fraction `r` of the population (fewer on ties).
pub fn quantile_threshold(pop: &SyntheticPopulation, map: &MetricMap, r: f64) -> Result<f64> {
    let metrics: Vec<f64> = pop.samples().iter().map(|s| map.metric(s.entropy)).collect();
    quantile_of(&metrics, r)
}

pub fn quantile_of(metrics: &[f64], r: f64) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Empty("population"));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidConfig(format!("offload fraction {r} outside (0, 1]")));
    }
    let mut sorted = metrics.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((r * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    Ok(sorted[n - k])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBin {
    pub weight: f64,
    /// Expected reward of an image in the bin.
    pub reward: f64,
}

/// Discrete metric distribution, bins in increasing reward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDistribution {
    bins: Vec<MetricBin>,
}

impl MetricDistribution {
    pub fn from_bins(mut bins: Vec<MetricBin>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Empty("metric distribution"));
        }
        if bins.len() > MAX_BINS {
            return Err(Error::InvalidDistribution(format!(
                "{} bins exceed the limit of {MAX_BINS}",
                bins.len()
            )));
        }
        if bins
            .iter()
            .any(|b| b.weight.is_nan() || b.weight < 0.0 || !b.reward.is_finite() || !b.weight.is_finite())
        {
            return Err(Error::InvalidDistribution("bad bin".into()));
        }
        let total: f64 = bins.iter().map(|b| b.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        bins.sort_by(|a, b| a.reward.total_cmp(&b.reward));
        Ok(Self { bins })
    }

    /// Equal-mass bins over sorted metrics; each bin's expected reward is
    /// its mean metric.
    pub fn equal_mass(metrics: &[f64], bins: usize) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::Empty("metrics"));
        }
        let mut sorted = metrics.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let bins = bins.clamp(1, MAX_BINS).min(n);
        let out = (0..bins)
            .map(|i| {
                let part = &sorted[i * n / bins..(i + 1) * n / bins];
                MetricBin {
                    weight: part.len() as f64 / n as f64,
                    reward: part.iter().sum::<f64>() / part.len() as f64,
                }
            })
            .collect();
        Self::from_bins(out)
    }

    pub fn bins(&self) -> &[MetricBin] {
        &self.bins
    }

    pub fn mean(&self) -> f64 {
        self.bins.iter().map(|b| b.weight * b.reward).sum()
    }
}

/// Best rational approximation `p / q` of `x` with `q <= max_den`.
fn rational_approx(x: f64, max_den: u64) -> (u64, u64) {
    let mut best = (x.round().max(1.0) as u64, 1);
    let mut err = (x - best.0 as f64).abs();
    for q in 2..=max_den {
        let p = (x * q as f64).round().max(1.0) as u64;
        let e = (x - p as f64 / q as f64).abs();
        if e + 1e-12 < err {
            best = (p, q);
            err = e;
        }
    }
    best
}

/// Expected gain `E[max(0, R - c)]` and offload probability using suffix
/// sums over bins sorted by reward.
struct Gains {
    rewards: Vec<f64>,
    suffix_w: Vec<f64>,
    suffix_wr: Vec<f64>,
}

impl Gains {
    fn new(dist: &MetricDistribution) -> Self {
        let n = dist.bins.len();
        let mut suffix_w = vec![0.0; n + 1];
        let mut suffix_wr = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let b = dist.bins[i];
            suffix_w[i] = suffix_w[i + 1] + b.weight;
            suffix_wr[i] = suffix_wr[i + 1] + b.weight * b.reward;
        }
        Self {
            rewards: dist.bins.iter().map(|b| b.reward).collect(),
            suffix_w,
            suffix_wr,
        }
    }

    fn expected_gain(&self, cutoff: f64) -> f64 {
        let k = self.rewards.partition_point(|&r| r < cutoff);
        self.suffix_wr[k] - cutoff * self.suffix_w[k]
    }
}

/// Value iteration over token states assuming i.i.d. metrics and periodic
/// arrivals at `arrival_rate` images per slot.
///
/// The mean gap is approximated by `p / q` and tokens are counted in units
/// of `1 / q` so that each arrival adds exactly `N p` of them. The
/// threshold at `n_bar` is the opportunity cost of spending a token,
/// `gamma^gap (V(n'_wait) - V(n'_offload))`.
pub fn solve_mdp(
    dist: &MetricDistribution,
    arrival_rate: f64,
    params: BucketParams,
    gamma: f64,
) -> Result<MdpPolicy> {
    if !(arrival_rate > 0.0 && arrival_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("arrival rate {arrival_rate} outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} outside [0, 1)")));
    }
    let (p, q) = rational_approx(1.0 / arrival_rate, MAX_RATE_DENOMINATOR);
    let discount = gamma.powf(p as f64 / q as f64);
    let fill = params.fill * p;
    let cost = params.cost * q;
    let cap = params.capacity * q;
    let states = cap as usize + 1;
    let next = |s: usize, offload: bool| -> usize {
        let spent = if offload { s as u64 - cost } else { s as u64 };
        (spent + fill).min(cap) as usize
    };
    let gains = Gains::new(dist);

    let mut v = vec![0.0; states];
    let mut fresh = vec![0.0; states];
    let mut sweeps = 0;
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..states {
            let wait = discount * v[next(s, false)];
            let value = if (s as u64) < cost {
                wait
            } else {
                let spend = discount * v[next(s, true)];
                wait + gains.expected_gain(wait - spend)
            };
            delta = delta.max((value - v[s]).abs());
            fresh[s] = value;
        }
        std::mem::swap(&mut v, &mut fresh);
        sweeps += 1;
        if delta < MDP_TOLERANCE {
            break;
        }
        if sweeps >= MDP_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: delta,
            });
        }
    }

    let thresholds: Vec<f64> = (params.cost..=params.capacity)
        .map(|n| {
            let s = (n * q) as usize;
            discount * (v[next(s, false)] - v[next(s, true)])
        })
        .collect();
    for (k, w) in thresholds.windows(2).enumerate() {
        if w[1] > w[0] + 1e-7 {
            return Err(Error::NotMonotone {
                n_bar: params.cost + k as u64 + 1,
                lower: w[0],
                higher: w[1],
            });
        }
    }
    Ok(MdpPolicy {
        thresholds,
        assumed_rate: arrival_rate,
        gamma,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bins(rs: &[f64]) -> MetricDistribution {
        let w = 1.0 / rs.len() as f64;
        MetricDistribution::from_bins(rs.iter().map(|&reward| MetricBin { weight: w, reward }).collect())
            .unwrap()
    }

    #[test]
    fn quantile_examples() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile_of(&xs, 1.0).unwrap(), 1.0);
        assert_eq!(quantile_of(&xs, 0.1).unwrap(), 91.0);
        assert_eq!(quantile_of(&[0.3; 17], 0.25).unwrap(), 0.3);
        assert!(quantile_of(&[], 0.5).is_err());
        assert!(quantile_of(&xs, 0.0).is_err());
    }

    #[test]
    fn quantile_matches_sort_and_count() {
        let xs: Vec<f64> = (0..997).map(|i| ((i * 7919) % 997) as f64 * 0.001).collect();
        for r in [0.01, 0.1, 0.25, 0.5, 0.9] {
            let t = quantile_of(&xs, r).unwrap();
            let above = xs.iter().filter(|&&x| x >= t).count();
            assert_eq!(above, (r * 997.0).floor() as usize);
        }
    }

    #[test]
    fn threshold_rules() {
        let params = BucketParams::new(1, 10, 40).unwrap();
        let h = HistoryWindow {
            gaps: vec![1],
            metrics: vec![0.5],
        };
        let ctx = DecisionContext {
            history: &h,
            bucket: BucketState(9),
            params,
            current_metric: 0.5,
            current_gap: 1,
        };
        assert!(!Policy::baseline(0.3).decide(&ctx).unwrap().offload);
        assert!(Policy::lower_bound(0.3).decide(&ctx).unwrap().offload);
        let full = DecisionContext {
            bucket: BucketState(10),
            ..ctx
        };
        assert!(Policy::baseline(0.3).decide(&full).unwrap().offload);
        assert!(Policy::baseline(0.5).decide(&full).unwrap().offload);
        assert!(!Policy::baseline(0.51).decide(&full).unwrap().offload);
    }

    #[test]
    fn equal_mass_bins() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let d = MetricDistribution::equal_mass(&xs, 5).unwrap();
        let rewards: Vec<f64> = d.bins().iter().map(|b| b.reward).collect();
        assert_eq!(rewards, vec![0.5, 2.5, 4.5, 6.5, 8.5]);
        assert!(d.bins().iter().all(|b| (b.weight - 0.2).abs() < 1e-15));
        assert_eq!(MetricDistribution::equal_mass(&xs, 5000).unwrap().bins().len(), 10);
    }

    #[test]
    fn myopic_thresholds_are_zero() {
        let params = BucketParams::new(1, 10, 40).unwrap();
        let mdp = solve_mdp(&bins(&[-0.2, 0.1, 0.7]), 1.0, params, 0.0).unwrap();
        assert_eq!(mdp.thresholds.len(), 31);
        assert!(mdp.thresholds.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn single_atom_offloads_whenever_feasible() {
        let params = BucketParams::new(1, 2, 4).unwrap();
        let mdp = solve_mdp(&bins(&[0.4]), 1.0, params, 0.99).unwrap();
        for n in 2..=4 {
            assert!(mdp.decide_metric(0.4, BucketState(n)), "n_bar={n}");
        }
        assert!(!mdp.decide_metric(0.4, BucketState(1)));
    }

    #[test]
    fn thresholds_fall_with_tokens() {
        let params = BucketParams::new(1, 10, 40).unwrap();
        let rs: Vec<f64> = (0..50).map(|i| (i as f64 / 49.0).powi(3)).collect();
        let mdp = solve_mdp(&bins(&rs), 1.0, params, 0.99).unwrap();
        assert!(mdp.thresholds.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(mdp.thresholds[0] > mdp.thresholds[30]);
    }

    #[test]
    fn fractional_rates_are_supported() {
        let params = BucketParams::new(1, 10, 40).unwrap();
        let rs = [0.0, 0.1, 0.5, 0.9];
        let slow = solve_mdp(&bins(&rs), 1.0 / 2.5, params, 0.99).unwrap();
        let fast = solve_mdp(&bins(&rs), 1.0, params, 0.99).unwrap();
        assert!(slow.thresholds[0] <= fast.thresholds[0]);
        assert_eq!(rational_approx(2.5, 64), (5, 2));
        assert_eq!(rational_approx(7.0 / 3.0, 64), (7, 3));
    }

    /// Discounted value from `start` of a stationary per-state cutoff policy,
    /// by Gaussian elimination on `(I - gamma P) v = r`.
    fn policy_value(rs: &[f64], cutoffs: &[usize], params: BucketParams, gamma: f64) -> f64 {
        let m = params.capacity as usize;
        let w = 1.0 / rs.len() as f64;
        let mut a = vec![vec![0.0; m + 2]; m + 1];
        for s in 0..=m {
            a[s][s] += 1.0;
            for (b, &r) in rs.iter().enumerate() {
                let off = s as u64 >= params.cost && b >= cutoffs[s];
                let spent = if off { s as u64 - params.cost } else { s as u64 };
                let nxt = (spent + params.fill).min(params.capacity) as usize;
                a[s][nxt] -= gamma * w;
                if off {
                    a[s][m + 1] += w * r;
                }
            }
        }
        for c in 0..=m {
            let piv = (c..=m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for i in 0..=m {
                if i != c {
                    let f = a[i][c] / a[c][c];
                    let pivot = a[c].clone();
                    for (x, p) in a[i][c..].iter_mut().zip(&pivot[c..]) {
                        *x -= f * p;
                    }
                }
            }
        }
        a[m][m + 1] / a[m][m]
    }

    #[test]
    fn matches_exhaustive_policy_search() {
        let params = BucketParams::new(1, 2, 4).unwrap();
        let rs = [0.1, 0.5, 0.9];
        for gamma in [0.5, 0.9, 0.99] {
            let mdp = solve_mdp(&bins(&rs), 1.0, params, gamma).unwrap();
            let mut best = (f64::NEG_INFINITY, vec![]);
            for code in 0..64usize {
                let mut cut = vec![3usize; 5];
                cut[2] = code % 4;
                cut[3] = (code / 4) % 4;
                cut[4] = code / 16;
                let v = policy_value(&rs, &cut, params, gamma);
                if v > best.0 + 1e-12 {
                    best = (v, cut);
                }
            }
            let chosen: Vec<usize> = (0..=4)
                .map(|s| {
                    (0..3)
                        .find(|&b| s >= 2 && mdp.decide_metric(rs[b], BucketState(s as u64)))
                        .unwrap_or(3)
                })
                .collect();
            assert_eq!(chosen[2..], best.1[2..], "gamma={gamma}");
            let v = policy_value(&rs, &chosen, params, gamma);
            assert!((v - best.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = BucketParams::new(1, 2, 4).unwrap();
        assert!(solve_mdp(&bins(&[0.1]), 0.0, params, 0.9).is_err());
        assert!(solve_mdp(&bins(&[0.1]), 1.0, params, 1.0).is_err());
        assert!(MetricDistribution::from_bins(vec![]).is_err());
        assert!(MetricDistribution::from_bins(vec![MetricBin {
            weight: 0.5,
            reward: 0.1
        }])
        .is_err());
    }
}
