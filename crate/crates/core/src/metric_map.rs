//! Entropy of classifier outputs and the kernel-regression map from entropy
//! to expected offloading reward.
//!
//! `f(h) = sum_k w_k R_k / sum_k w_k` with `w_k = exp(-lambda (h - h_k)^2)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of grid points used by the interpolated evaluation mode.
pub const GRID_POINTS: usize = 1024;

/// A probability vector over the class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("class distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(z: &ClassDistribution) -> f64 {
    let h: f64 = z
        .0
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
struct Grid {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

/// Fitted entropy-to-reward map. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMap {
    anchors: Vec<(f64, f64)>,
    lambda: f64,
    grid: Option<Grid>,
}

impl MetricMap {
    /// Stores the `(entropy, reward)` anchors. The estimator is lazy, so
    /// there is nothing to fit beyond validation.
    pub fn fit(samples: &[(f64, f64)], lambda: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("metric map anchors"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel bandwidth lambda must be positive, got {lambda}"
            )));
        }
        if samples.iter().any(|(h, r)| !h.is_finite() || !r.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite anchor".into()));
        }
        Ok(Self {
            anchors: samples.to_vec(),
            lambda,
            grid: None,
        })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn has_grid(&self) -> bool {
        self.grid.is_some()
    }

    /// Exact O(K) evaluation.
    pub fn evaluate(&self, h_bar: f64) -> f64 {
        // Shift every exponent by the nearest anchor's so the largest weight
        // is exactly 1 and far queries cannot underflow to 0/0.
        let d_min = self
            .anchors
            .iter()
            .map(|(h, _)| (h_bar - h) * (h_bar - h))
            .fold(f64::INFINITY, f64::min);
        let mut num = 0.0;
        let mut den = 0.0;
        for &(h, r) in &self.anchors {
            let d = (h_bar - h) * (h_bar - h);
            let w = (-self.lambda * (d - d_min)).exp();
            num += w * r;
            den += w;
        }
        num / den
    }

    /// Precomputes a [`GRID_POINTS`]-point table over `[0, max_entropy]` for
    /// linear interpolation. Queries outside the range fall back to exact.
    pub fn with_grid(mut self, max_entropy: f64) -> Self {
        let step = max_entropy / (GRID_POINTS - 1) as f64;
        let values = (0..GRID_POINTS)
            .map(|i| self.evaluate(i as f64 * step))
            .collect();
        self.grid = Some(Grid {
            lo: 0.0,
            step,
            values,
        });
        self
    }

    /// Grid-interpolated evaluation when a grid is present, exact otherwise.
    pub fn metric(&self, h_bar: f64) -> f64 {
        let Some(grid) = &self.grid else {
            return self.evaluate(h_bar);
        };
        let pos = (h_bar - grid.lo) / grid.step;
        if pos.is_nan() || pos < 0.0 || pos > (grid.values.len() - 1) as f64 {
            return self.evaluate(h_bar);
        }
        let i = (pos.floor() as usize).min(grid.values.len() - 2);
        let frac = pos - i as f64;
        grid.values[i] * (1.0 - frac) + grid.values[i + 1] * frac
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# lambda={:.16e}", self.lambda)?;
        writeln!(out, "entropy,reward")?;
        for (h, r) in &self.anchors {
            writeln!(out, "{:.16e},{:.16e}", h, r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a map written by [`MetricMap::write`]. The grid is not stored.
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, msg: &str| Error::Parse {
            what: "metric map",
            line,
            msg: msg.to_string(),
        };
        let first = lines.next().ok_or_else(|| bad(1, "missing header"))??;
        let lambda: f64 = first
            .strip_prefix("# lambda=")
            .ok_or_else(|| bad(1, "expected '# lambda=<value>'"))?
            .trim()
            .parse()
            .map_err(|_| bad(1, "bad lambda"))?;
        let header = lines.next().ok_or_else(|| bad(2, "missing column header"))??;
        if header.trim() != "entropy,reward" {
            return Err(bad(2, "expected 'entropy,reward'"));
        }
        let mut anchors = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (h, r) = line
                .split_once(',')
                .ok_or_else(|| bad(i + 3, "expected two columns"))?;
            let h = h.trim().parse().map_err(|_| bad(i + 3, "bad entropy"))?;
            let r = r.trim().parse().map_err(|_| bad(i + 3, "bad reward"))?;
            anchors.push((h, r));
        }
        Self::fit(&anchors, lambda)
    }
}

/// Median heuristic bandwidth `1 / (2 median(|h_i - h_j|)^2)` over a seeded
/// subsample of at most `subsample` entropies.
pub fn median_heuristic_lambda(entropies: &[f64], subsample: usize, seed: u64) -> Result<f64> {
    if entropies.len() < 2 {
        return Err(Error::Empty("need at least two entropies for the median heuristic"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = subsample.clamp(2, entropies.len());
    let picked: Vec<f64> = sample(&mut rng, entropies.len(), k)
        .into_iter()
        .map(|i| entropies[i])
        .collect();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            dists.push((picked[i] - picked[j]).abs());
        }
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;
    if median <= 0.0 {
        return Err(Error::InvalidDistribution(
            "median pairwise entropy distance is zero".into(),
        ));
    }
    Ok(1.0 / (2.0 * median * median))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let mut p = vec![0.0; 1000];
        p[17] = 1.0;
        assert_eq!(entropy(&ClassDistribution::new(p).unwrap()), 0.0);
    }

    #[test]
    fn entropy_of_uniform_is_log_classes() {
        let z = ClassDistribution::new(vec![1.0 / 1000.0; 1000]).unwrap();
        assert!((entropy(&z) - 1000f64.ln()).abs() < 1e-9);
        assert!((entropy(&z) - 6.9078).abs() < 1e-4);
    }

    #[test]
    fn entropy_three_point() {
        let z = ClassDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let oracle = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((entropy(&z) - oracle).abs() < 1e-15);
        assert!((entropy(&z) - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_normalized() {
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
    }

    #[test]
    fn single_anchor_is_constant() {
        let m = MetricMap::fit(&[(2.0, 1.0)], 3.0).unwrap();
        for h in [0.0, 1.0, 2.0, 6.9, 50.0] {
            assert_eq!(m.evaluate(h), 1.0);
        }
    }

    #[test]
    fn symmetric_anchors_cancel() {
        let m = MetricMap::fit(&[(1.0, -1.0), (3.0, 1.0)], 0.7).unwrap();
        assert_eq!(m.evaluate(2.0), 0.0);
    }

    #[test]
    fn two_anchor_hand_value() {
        let m = MetricMap::fit(&[(1.0, 0.0), (2.0, 1.0)], 1.0).unwrap();
        let e = (-1.0f64).exp();
        let expected = e / (1.0 + e);
        assert!((m.evaluate(1.0) - expected).abs() < 1e-15);
        assert!((m.evaluate(1.0) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn large_lambda_recovers_anchor() {
        let m = MetricMap::fit(&[(0.5, -1.0), (1.5, 1.0), (4.0, 0.0)], 1e4).unwrap();
        assert!((m.evaluate(1.5) - 1.0).abs() < 1e-6);
        assert!((m.evaluate(0.5) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn far_query_does_not_underflow() {
        let m = MetricMap::fit(&[(0.0, 0.0), (1.0, 1.0)], 1e6).unwrap();
        let v = m.evaluate(100.0);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_rewards_are_reproduced() {
        let anchors: Vec<_> = (0..50).map(|i| (i as f64 * 0.1, 0.25)).collect();
        let m = MetricMap::fit(&anchors, 2.0).unwrap();
        for h in [0.0, 0.33, 2.5, 7.0] {
            assert!((m.evaluate(h) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_rejects_empty_and_bad_lambda() {
        assert!(MetricMap::fit(&[], 1.0).is_err());
        assert!(MetricMap::fit(&[(1.0, 1.0)], 0.0).is_err());
        assert!(MetricMap::fit(&[(1.0, 1.0)], f64::NAN).is_err());
    }

    #[test]
    fn median_heuristic_on_evenly_spaced() {
        // pairwise |i - j| for 0..=4: 1,1,1,1,2,2,2,3,3,4 -> upper median 2
        let h = [0.0, 1.0, 2.0, 3.0, 4.0];
        let lambda = median_heuristic_lambda(&h, 10, 0).unwrap();
        assert!((lambda - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let m = MetricMap::fit(&[(0.1234567890123, 1.0), (2.0 / 3.0, 0.0)], 0.3).unwrap();
        m.write(&path).unwrap();
        assert_eq!(MetricMap::read(&path).unwrap(), m);
    }
}
