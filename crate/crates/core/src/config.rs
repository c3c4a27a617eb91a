//! Flat experiment configuration shared by searches, random-search baselines
//! and run logs. Every field has a default; a TOML file overrides defaults and
//! `TUNAS_<FIELD>` environment variables override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench_oracle::BenchmarkConfig;
use crate::controller::{LrMode, RlSchedule, DESK_BASE_LR};
use crate::error::{Error, Result};
use crate::latency::{LatencyModel, LatencyTable, LatencyTarget};
use crate::reward::{RewardConfig, RewardKind};
use crate::space::{build_space_with, LayoutConfig, SearchSpace, SpaceKind};
use crate::supernet::{DatasetConfig, SharingMode, TrainHyper, WarmupSchedule};

pub const ENV_PREFIX: &str = "TUNAS_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySource {
    Supernet,
    Oracle,
}

impl QualitySource {
    pub fn as_str(self) -> &'static str {
        match self {
            QualitySource::Supernet => "supernet",
            QualitySource::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for QualitySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supernet" => Ok(QualitySource::Supernet),
            "oracle" => Ok(QualitySource::Oracle),
            other => Err(Error::Config(format!("unknown quality source {other:?} (expected supernet or oracle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SpaceKind,
    /// Optional TOML file with a `LayoutConfig`; defaults otherwise.
    pub layout: Option<PathBuf>,
    /// JSON or CSV lookup table; a synthetic table is generated when absent.
    pub latency_table: Option<PathBuf>,
    pub latency_mean_ms: f64,
    pub latency_seed: u64,
    pub target_ms: f64,
    pub tolerance_ms: f64,

    pub reward: RewardKind,
    /// `None` uses the default for the reward kind.
    pub beta: Option<f64>,

    pub steps: u64,
    pub rl_lr_mode: LrMode,
    pub rl_base_lr: f64,
    pub rl_frozen_fraction: f64,
    pub telemetry_every: u64,

    pub quality: QualitySource,
    pub bench_q_base: f64,
    pub bench_latency_gain: f64,
    pub bench_saturation: Option<f64>,
    pub bench_bonus_scale: f64,
    pub bench_noise_scale: f64,
    pub bench_seed: u64,

    pub warmup: String,
    pub warmup_fraction: f64,
    pub sharing: SharingMode,
    pub remat: bool,
    pub train_lr: f64,
    pub train_batch: usize,
    pub valid_batch: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_warmup_fraction: f64,
    /// Training steps given to each standalone evaluation; 0 means one epoch.
    pub standalone_steps: u64,
    pub standalone_seed: u64,

    pub data_classes: usize,
    pub data_features: usize,
    pub data_train: usize,
    pub data_valid: usize,
    pub data_clusters: usize,
    pub data_center_scale: f64,
    pub data_noise: f64,
    pub data_seed: u64,

    pub seed: u64,
    pub repeats: usize,
    pub candidates: usize,
    pub max_attempts: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        let hyper = TrainHyper::default();
        let data = DatasetConfig::default();
        SearchConfig {
            space: SpaceKind::Proxylessnas,
            layout: None,
            latency_table: None,
            latency_mean_ms: 84.0,
            latency_seed: 0,
            target_ms: 84.0,
            tolerance_ms: 1.0,
            reward: RewardKind::Absolute,
            beta: None,
            steps: 1000,
            rl_lr_mode: LrMode::Exponential,
            rl_base_lr: DESK_BASE_LR,
            rl_frozen_fraction: 0.25,
            telemetry_every: 100,
            quality: QualitySource::Oracle,
            bench_q_base: bench.q_base,
            bench_latency_gain: bench.latency_gain,
            bench_saturation: bench.saturation,
            bench_bonus_scale: bench.bonus_scale,
            bench_noise_scale: bench.noise_scale,
            bench_seed: 0,
            warmup: "both".into(),
            warmup_fraction: 0.25,
            sharing: SharingMode::Collapsed,
            remat: false,
            train_lr: hyper.base_lr,
            train_batch: hyper.batch_size,
            valid_batch: hyper.batch_size,
            weight_decay: hyper.weight_decay,
            momentum: hyper.momentum,
            lr_warmup_fraction: hyper.warmup_fraction,
            standalone_steps: 0,
            standalone_seed: 0,
            data_classes: data.classes,
            data_features: data.features,
            data_train: data.train,
            data_valid: data.valid,
            data_clusters: data.clusters_per_class,
            data_center_scale: data.center_scale,
            data_noise: data.noise,
            data_seed: 0,
            seed: 0,
            repeats: 5,
            candidates: 20,
            max_attempts: 1_000_000,
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SearchConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (defaults when `None`) and applies `TUNAS_*` overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
            None => SearchConfig::default(),
        };
        base.with_overrides(std::env::vars())
    }

    /// Applies `TUNAS_<FIELD>=value` pairs; other variables are ignored.
    /// Values are parsed according to the field's current type.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut changed = false;
        for (key, value) in vars {
            let Some(field) = key.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = field.to_ascii_lowercase();
            let raw = value.as_ref().trim();
            let parsed = match table.get(&field) {
                Some(toml::Value::Integer(_)) => raw
                    .parse::<i64>()
                    .map(toml::Value::Integer)
                    .map_err(|_| Error::Config(format!("{}{}: expected an integer, got {raw:?}", ENV_PREFIX, field.to_ascii_uppercase())))?,
                Some(toml::Value::Float(_)) => raw
                    .parse::<f64>()
                    .map(toml::Value::Float)
                    .map_err(|_| Error::Config(format!("{}{}: expected a number, got {raw:?}", ENV_PREFIX, field.to_ascii_uppercase())))?,
                Some(toml::Value::Boolean(_)) => raw
                    .parse::<bool>()
                    .map(toml::Value::Boolean)
                    .map_err(|_| Error::Config(format!("{}{}: expected true or false, got {raw:?}", ENV_PREFIX, field.to_ascii_uppercase())))?,
                Some(_) => toml::Value::String(raw.to_string()),
                None => match field.as_str() {
                    "beta" | "bench_saturation" => raw
                        .parse::<f64>()
                        .map(toml::Value::Float)
                        .map_err(|_| Error::Config(format!("{}{}: expected a number, got {raw:?}", ENV_PREFIX, field.to_ascii_uppercase())))?,
                    "layout" | "latency_table" => toml::Value::String(raw.to_string()),
                    _ => return Err(Error::Config(format!("unknown override {}", key.as_ref()))),
                },
            };
            table.insert(field, parsed);
            changed = true;
        }
        let cfg: SearchConfig = if changed { table.try_into()? } else { self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.telemetry_every == 0 {
            return Err(Error::Config("telemetry_every must be positive".into()));
        }
        if self.repeats == 0 || self.candidates == 0 {
            return Err(Error::Config("repeats and candidates must be positive".into()));
        }
        if self.train_batch == 0 || self.valid_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.schedule()?;
        self.reward_config()?;
        self.target()?;
        self.warmup_schedule()?;
        Ok(())
    }

    pub fn layout_config(&self) -> Result<LayoutConfig> {
        match &self.layout {
            Some(p) => LayoutConfig::from_toml(&std::fs::read_to_string(p)?),
            None => Ok(LayoutConfig::default()),
        }
    }

    pub fn build_space(&self) -> Result<SearchSpace> {
        build_space_with(self.space, &self.layout_config()?)
    }

    pub fn latency_table(&self, space: &SearchSpace) -> Result<LatencyTable> {
        match &self.latency_table {
            Some(p) => LatencyTable::load(p),
            None => LatencyTable::synthetic(space, self.latency_seed, self.latency_mean_ms),
        }
    }

    pub fn latency_model(&self, space: &SearchSpace) -> Result<LatencyModel> {
        LatencyModel::compile(&self.latency_table(space)?, space)
    }

    pub fn target(&self) -> Result<LatencyTarget> {
        LatencyTarget::new(self.target_ms, self.tolerance_ms)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.reward.default_beta())
    }

    pub fn reward_config(&self) -> Result<RewardConfig<f64>> {
        RewardConfig::new(self.reward, self.beta(), self.target_ms)
    }

    pub fn schedule(&self) -> Result<RlSchedule> {
        RlSchedule::new(self.rl_base_lr, self.steps, self.rl_lr_mode, self.rl_frozen_fraction)
    }

    pub fn warmup_schedule(&self) -> Result<WarmupSchedule> {
        let flag = WarmupSchedule::from_flag(&self.warmup)?;
        WarmupSchedule::new(self.warmup_fraction, flag.ops, flag.filters)
    }

    pub fn bench_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            q_base: self.bench_q_base,
            latency_gain: self.bench_latency_gain,
            saturation: self.bench_saturation,
            bonus_scale: self.bench_bonus_scale,
            noise_scale: self.bench_noise_scale,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            classes: self.data_classes,
            features: self.data_features,
            train: self.data_train,
            valid: self.data_valid,
            clusters_per_class: self.data_clusters,
            center_scale: self.data_center_scale,
            noise: self.data_noise,
        }
    }

    /// Supernet training schedule over the search's `steps`.
    pub fn search_hyper(&self) -> TrainHyper {
        TrainHyper {
            base_lr: self.train_lr,
            total_steps: self.steps,
            warmup_fraction: self.lr_warmup_fraction,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.train_batch,
        }
    }

    pub fn standalone_steps(&self) -> u64 {
        if self.standalone_steps > 0 {
            self.standalone_steps
        } else {
            (self.data_train / self.train_batch).max(1) as u64
        }
    }

    /// Same optimizer settings as the supernet, over the standalone step budget.
    pub fn standalone_hyper(&self) -> TrainHyper {
        TrainHyper {
            total_steps: self.standalone_steps(),
            ..self.search_hyper()
        }
    }

    /// Hex SHA-256 of the resolved config with `seed` cleared, so repeats of one
    /// experiment share a hash.
    pub fn experiment_hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.seed = 0;
        let text = serde_json::to_string(&cfg).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = SearchConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(SearchConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn file_fields_override_defaults() {
        let cfg = SearchConfig::from_toml("space = \"toy\"\nreward = \"hard\"\nbeta = -10.0\nsteps = 40\nquality = \"supernet\"\nsharing = \"per_path\"\n").unwrap();
        assert_eq!(cfg.space, SpaceKind::Toy);
        assert_eq!(cfg.reward, RewardKind::HardExponential);
        assert_eq!(cfg.beta(), -10.0);
        assert_eq!(cfg.steps, 40);
        assert_eq!(cfg.quality, QualitySource::Supernet);
        assert_eq!(cfg.sharing, SharingMode::PerPath);
        assert_eq!(cfg.target_ms, 84.0);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(SearchConfig::from_toml("stepz = 3\n").is_err());
        assert!(SearchConfig::from_toml("steps = 0\n").is_err());
        assert!(SearchConfig::from_toml("warmup = \"sometimes\"\n").is_err());
    }

    #[test]
    fn environment_overrides_by_field_type() {
        let base = SearchConfig::default();
        let vars = [
            ("TUNAS_STEPS", "250"),
            ("TUNAS_TARGET_MS", "70.5"),
            ("TUNAS_REWARD", "soft"),
            ("TUNAS_REMAT", "true"),
            ("TUNAS_BETA", "-0.5"),
            ("PATH", "/usr/bin"),
        ];
        let cfg = base.with_overrides(vars).unwrap();
        assert_eq!(cfg.steps, 250);
        assert_eq!(cfg.target_ms, 70.5);
        assert_eq!(cfg.reward, RewardKind::SoftExponential);
        assert!(cfg.remat);
        assert_eq!(cfg.beta, Some(-0.5));
        assert!(base.with_overrides([("TUNAS_STEPS", "many")]).is_err());
        assert!(base.with_overrides([("TUNAS_NOPE", "1")]).is_err());
    }

    #[test]
    fn experiment_hash_ignores_seed_only() {
        let a = SearchConfig::default();
        let b = SearchConfig { seed: 9, ..a.clone() };
        let c = SearchConfig { steps: 7, ..a.clone() };
        assert_eq!(a.experiment_hash(), b.experiment_hash());
        assert_ne!(a.experiment_hash(), c.experiment_hash());
        assert_eq!(a.experiment_hash().len(), 64);
    }

    #[test]
    fn one_epoch_standalone_default() {
        let cfg = SearchConfig::default();
        assert_eq!(cfg.standalone_steps(), 8192 / 64);
        assert_eq!(SearchConfig { standalone_steps: 10, ..cfg }.standalone_steps(), 10);
    }
}
