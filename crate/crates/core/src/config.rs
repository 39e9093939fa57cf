//! TOML scenario configuration with strict parsing and sweep expansion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dqn::TrainerConfig;
use crate::error::{Error, Result};
use crate::token_bucket::BucketParams;
use crate::trace_gen::{ArrivalConfig, CategoryFractions, EntropyModel, SelectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSection {
    pub r_num: u64,
    pub r_den: u64,
    pub b_num: u64,
    pub b_den: u64,
}

impl BucketSection {
    pub fn params(&self) -> Result<BucketParams> {
        BucketParams::from_rational(self.r_num, self.r_den, self.b_num, self.b_den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub train_size: usize,
    pub test_size: usize,
    pub fractions: CategoryFractions,
    pub entropy: EntropyModel,
    /// Kernel bandwidth; the median heuristic is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lambda_subsample: usize,
    pub mdp_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub segments_per_sync: usize,
    pub sync_count: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub window: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub gap_clip: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub train_length: usize,
    pub test_length: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub gamma: f64,
    pub bucket: BucketSection,
    pub arrival: ArrivalConfig,
    pub selection: SelectionConfig,
    pub population: PopulationSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
    /// Dotted field path to the list of values it takes in a sweep.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl ScenarioConfig {
    /// Desk-scale defaults: `r = 0.1`, `b = 4`, correlated outputs with
    /// `sp = 0.1`, `rprob = 0.1`, periodic arrivals.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            gamma: 0.99,
            bucket: BucketSection {
                r_num: 1,
                r_den: 10,
                b_num: 4,
                b_den: 1,
            },
            arrival: ArrivalConfig::periodic(1),
            selection: SelectionConfig { sp: 0.1, rprob: 0.1 },
            population: PopulationSection {
                train_size: 33_334,
                test_size: 16_666,
                fractions: CategoryFractions {
                    both_correct: 0.70,
                    both_wrong: 0.0447,
                    strong_only: 0.2553,
                },
                entropy: EntropyModel::default(),
                lambda: None,
                lambda_subsample: 2000,
                mdp_bins: 1024,
            },
            trainer: TrainerSection {
                segments_per_sync: 1 << 12,
                sync_count: 200,
                batch_size: 64,
                learning_rate: 1e-3,
                window: 97,
                hidden_layers: 5,
                hidden_units: 64,
                gap_clip: 255,
            },
            eval: EvalSection {
                train_length: 1_000_000,
                test_length: 1_000_000,
                seeds: (1..=20).collect(),
            },
            sweep: BTreeMap::new(),
        }
    }

    /// Full-size schedule: `10^8` training images, `4000 x 2^14` segments,
    /// `10^7`-image test traces.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.trainer.segments_per_sync = 1 << 14;
        cfg.trainer.sync_count = 4000;
        cfg.eval.train_length = 100_000_000;
        cfg.eval.test_length = 10_000_000;
        cfg
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    /// Applies the run-length fields of a preset, keeping everything else.
    pub fn rescale(&mut self, scale: Scale) {
        let p = Self::preset(scale);
        self.trainer.segments_per_sync = p.trainer.segments_per_sync;
        self.trainer.sync_count = p.trainer.sync_count;
        self.eval.train_length = p.eval.train_length;
        self.eval.test_length = p.eval.test_length;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.bucket.params()?;
        self.arrival.validate()?;
        self.selection.validate()?;
        self.trainer(0).validate()?;
        if self.population.train_size == 0 || self.population.test_size == 0 {
            return Err(Error::InvalidConfig("population sizes must be >= 1".into()));
        }
        if let Some(l) = self.population.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda {l} must be positive")));
            }
        }
        if self.population.mdp_bins == 0 || self.population.mdp_bins > crate::policies::MAX_BINS {
            return Err(Error::InvalidConfig("mdp_bins must be in 1..=1024".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one evaluation seed is required".into()));
        }
        if self.eval.train_length < 2 || self.eval.test_length == 0 {
            return Err(Error::InvalidConfig("trace lengths too short".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<BucketParams> {
        self.bucket.params()
    }

    pub fn trainer(&self, seed: u64) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            gamma: self.gamma,
            segments_per_sync: t.segments_per_sync,
            sync_count: t.sync_count,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            window: t.window,
            hidden_layers: t.hidden_layers,
            hidden_units: t.hidden_units,
            gap_clip: t.gap_clip,
            seed,
        }
    }

    /// Expands `[sweep]` into the Cartesian product of its value lists, in
    /// key order with the last key varying fastest. Without a sweep the
    /// result is the config itself.
    pub fn expand(&self) -> Result<Vec<(String, ScenarioConfig)>> {
        let mut base = self.clone();
        let sweep = std::mem::take(&mut base.sweep);
        let mut points: Vec<(String, toml::Table)> = vec![(String::new(), to_table(&base)?)];
        for (path, values) in &sweep {
            if values.is_empty() {
                return Err(Error::InvalidConfig(format!("sweep over {path} has no values")));
            }
            let mut next = Vec::with_capacity(points.len() * values.len());
            for (label, table) in &points {
                for v in values {
                    let mut t = table.clone();
                    set_path(&mut t, path, v.clone())?;
                    let sep = if label.is_empty() { "" } else { "," };
                    next.push((format!("{label}{sep}{path}={v}"), t));
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|(label, t)| {
                let cfg: ScenarioConfig = t
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
                cfg.validate()?;
                Ok((label, cfg))
            })
            .collect()
    }
}

fn to_table(cfg: &ScenarioConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::InvalidConfig(format!("unknown sweep field {path}"));
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().ok_or_else(unknown)?;
    let mut cur = table;
    for p in parts {
        cur = cur.get_mut(p).and_then(toml::Value::as_table_mut).ok_or_else(unknown)?;
    }
    let slot = cur.get_mut(last).ok_or_else(unknown)?;
    // integers written where floats are expected
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

/// Derives independent sub-seeds from a scenario seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [ScenarioConfig::desk(), ScenarioConfig::paper()] {
            let text = cfg.to_toml().unwrap();
            let back = ScenarioConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ScenarioConfig::desk().to_toml().unwrap();
        let typo = text.replacen("rprob", "rpob", 1);
        let err = ScenarioConfig::parse(&typo).unwrap_err();
        assert_eq!(err.kind(), "invalid_config");
        let extra = format!("colour = 3\n{text}");
        assert!(ScenarioConfig::parse(&extra).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ScenarioConfig::desk();
        cfg.bucket.r_num = 2;
        cfg.bucket.r_den = 1;
        assert!(ScenarioConfig::parse(&cfg.to_toml().unwrap()).is_err());
        let mut cfg = ScenarioConfig::desk();
        cfg.selection.sp = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_expands_cartesian_product() {
        let mut cfg = ScenarioConfig::desk();
        cfg.sweep.insert(
            "selection.rprob".into(),
            vec![toml::Value::Float(0.001), toml::Value::Integer(1)],
        );
        cfg.sweep.insert(
            "bucket.b_num".into(),
            vec![toml::Value::Integer(1), toml::Value::Integer(4), toml::Value::Integer(20)],
        );
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::parse(&text).unwrap(), cfg);
        let points = cfg.expand().unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(points[0].0, "bucket.b_num=1,selection.rprob=0.001");
        assert_eq!(points[5].1.bucket.b_num, 20);
        assert_eq!(points[5].1.selection.rprob, 1.0);
        assert!(points.iter().all(|(_, c)| c.sweep.is_empty()));
        let mut bad = ScenarioConfig::desk();
        bad.sweep.insert("selection.nope".into(), vec![toml::Value::Integer(1)]);
        assert!(bad.expand().is_err());
    }

    #[test]
    fn seeds_mix_apart() {
        assert_ne!(mix_seed(1, 1), mix_seed(1, 2));
        assert_ne!(mix_seed(1, 1), mix_seed(2, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
