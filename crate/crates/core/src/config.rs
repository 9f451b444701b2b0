//! Experiment configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregation::{DatasetOptions, SplitBounds};
use crate::error::{Error, Result};
use crate::hiam::{InteractionMode, ModelConfig};
use crate::synthgen::{commuter_profile, gravity_demand, weekend_profile, SimConfig};
use crate::topology::MetroGraph;
use crate::training::{LrSchedule, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Edge-list file, relative to the config file.
    pub graph: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub days: usize,
    pub intervals_per_day: usize,
    /// Network-wide passengers per interval before intraday modulation.
    pub total_demand: f64,
    pub hop_decay: f64,
    pub per_hop_intervals: f64,
    pub travel_noise: f64,
    pub max_trip_intervals: usize,
    pub tide_pairs: Vec<(usize, usize)>,
    pub tide_amplitude: f64,
    pub day_factor_sigma: f64,
    pub station_day_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub interaction: InteractionMode,
    pub use_uod_long: bool,
    pub use_uod_short: bool,
    pub use_raw_u: bool,
    pub scale_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub network: NetworkSection,
    pub sim: SimSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

fn section<T: DeserializeOwned>(table: &toml::Table, name: &str) -> Result<T> {
    let value = table.get(name).ok_or_else(|| Error::MissingKey(name.to_string()))?;
    T::deserialize(value.clone()).map_err(|e| {
        let msg = e.message().to_string();
        match msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            Some(field) => Error::MissingKey(format!("{name}.{field}")),
            None => Error::Config(format!("[{name}]: {msg}")),
        }
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let version = table.get("schema_version").ok_or_else(|| Error::MissingKey("schema_version".into()))?;
        let version = version
            .as_integer()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| Error::Config("schema_version must be a non-negative integer".into()))?;
        if version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: version, expected: CONFIG_SCHEMA_VERSION });
        }
        let seed = table.get("seed").ok_or_else(|| Error::MissingKey("seed".into()))?;
        let seed = seed
            .as_integer()
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?;
        let known = ["schema_version", "seed", "network", "sim", "data", "model", "train"];
        if let Some(extra) = table.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{extra}`")));
        }
        let cfg = Self {
            seed,
            base_dir: base_dir.to_path_buf(),
            network: section(&table, "network")?,
            sim: section(&table, "sim")?,
            data: section(&table, "data")?,
            model: section(&table, "model")?,
            train: section(&table, "train")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn validate(&self) -> Result<()> {
        let days = self.data.train_days + self.data.val_days + self.data.test_days;
        if days > self.sim.days {
            return Err(Error::Config(format!(
                "data splits cover {days} days but the simulation has {}",
                self.sim.days
            )));
        }
        self.train_config().validate()
    }

    pub fn graph_path(&self) -> PathBuf {
        self.base_dir.join(&self.network.graph)
    }

    pub fn sim_config(&self, graph: &MetroGraph) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            graph: graph.clone(),
            days: s.days,
            intervals_per_day: s.intervals_per_day,
            base_demand: gravity_demand(graph, s.total_demand, s.hop_decay, self.seed),
            weekday_profile: commuter_profile(s.intervals_per_day),
            weekend_profile: weekend_profile(s.intervals_per_day),
            per_hop_intervals: s.per_hop_intervals,
            travel_noise: s.travel_noise,
            max_trip_intervals: s.max_trip_intervals,
            tide_pairs: s.tide_pairs.clone(),
            tide_amplitude: s.tide_amplitude,
            day_factor_sigma: s.day_factor_sigma,
            station_day_sigma: s.station_day_sigma,
            seed: self.seed,
        }
    }

    pub fn splits(&self) -> SplitBounds {
        let d = &self.data;
        SplitBounds::from_days(d.train_days, d.val_days, d.test_days, self.sim.intervals_per_day)
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            n: self.data.n,
            m: self.data.m,
            intervals_per_day: self.sim.intervals_per_day,
            splits: self.splits(),
        }
    }

    pub fn model_config(&self, stations: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            stations,
            k: self.data.k,
            d: m.d,
            heads: m.heads,
            n: self.data.n,
            m: self.data.m,
            use_uod_long: m.use_uod_long,
            use_uod_short: m.use_uod_short,
            use_raw_u: m.use_raw_u,
            interaction: m.interaction,
            scale_attention: m.scale_attention,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_every_epochs: t.decay_every_epochs,
            schedule: t.schedule,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: self.seed,
            max_steps: t.max_steps,
        }
    }
}
