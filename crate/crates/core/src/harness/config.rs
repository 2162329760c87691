//! Flat key-value experiment configuration.
//!
//! A file names a `profile` (`desk` or `full`) whose defaults fill every key
//! it does not set. Unknown keys are rejected. The root seed may come from
//! `UAVMETA_SEED` when the file leaves it out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{db_to_linear, dbm_to_watts, random_device_cells, EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::nn::{Activation, AdamConfig, InitScheme, MlpSpec};
use crate::offline::{LossKind, OfflineConfig, TrainSplit};
use crate::rl::{DqnConfig, EpsilonSchedule, TdConfig};
use crate::util::write_atomic;

/// Environment variable consulted for the root seed.
pub const SEED_ENV_VAR: &str = "UAVMETA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorKind {
    Random,
    Dqn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: String,
    pub root_seed: u64,
    pub output_dir: PathBuf,

    pub grid_side_cells: usize,
    pub num_devices: usize,
    pub episode_length: usize,
    pub cell_length_m: f64,
    pub uav_height_m: f64,
    pub ref_gain_db: f64,
    pub bandwidth_hz: f64,
    pub payload_bits: f64,
    pub noise_power_dbm: f64,
    pub aoi_max: u32,
    pub layout_seed: u64,

    /// Trade-off of the held-out test task.
    pub test_lambda: f64,
    /// Meta-training tasks take a log-uniform grid over `[lambda_min, lambda_max]`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub num_meta_tasks: usize,

    pub dataset_size: usize,
    pub split_ratio: f64,
    pub behavior: BehaviorKind,
    pub dqn_episodes: usize,
    pub dqn_lr: f64,
    /// Replay snapshot point in episodes; 0 exports after the last episode.
    pub dqn_export_episode: usize,

    pub hidden: Vec<usize>,
    pub activation: Activation,

    pub gamma: f64,
    pub reward_scale: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub target_sync_every: u64,
    /// Gradient steps per epoch; 0 means one pass over the training split.
    pub updates_per_epoch: usize,
    /// Split used by plain `train-cql` runs.
    pub cql_split: TrainSplit,

    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_epochs: usize,
    pub shots: usize,
    pub inner_steps: usize,
    pub second_order: bool,

    pub adaptation_epochs: usize,
    /// Epoch at which the AoI/power comparison is read off.
    pub comparison_epoch: usize,
    pub eval_episodes: usize,
    pub seeds: usize,
    pub shots_sweep: Vec<usize>,
    pub tasks_sweep: Vec<usize>,

    pub rain_tasks: usize,
    pub rain_width: usize,
    pub rain_height: usize,
    pub rainfall_mm_per_h: f64,
    pub rain_path_km: f64,
    /// Adaptation epochs of the resilience study.
    pub resilience_epochs: usize,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Small grid that runs the whole pipeline in minutes on one core.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            root_seed: 2024,
            output_dir: PathBuf::from("runs/desk"),
            grid_side_cells: 5,
            num_devices: 4,
            episode_length: 50,
            cell_length_m: 100.0,
            uav_height_m: 100.0,
            ref_gain_db: -40.0,
            bandwidth_hz: 1e6,
            payload_bits: 5e6,
            noise_power_dbm: -100.0,
            aoi_max: 10,
            layout_seed: 7,
            test_lambda: 300.0,
            lambda_min: 10.0,
            lambda_max: 1000.0,
            num_meta_tasks: 4,
            dataset_size: 300,
            split_ratio: 0.5,
            behavior: BehaviorKind::Dqn,
            dqn_episodes: 60,
            dqn_lr: 1e-3,
            dqn_export_episode: 0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            gamma: 0.9,
            reward_scale: 0.1,
            alpha: 1.0,
            lr: 1e-3,
            batch_size: 64,
            target_sync_every: 100,
            updates_per_epoch: 1,
            cql_split: TrainSplit::Full,
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            meta_epochs: 150,
            shots: 64,
            inner_steps: 1,
            second_order: false,
            adaptation_epochs: 100,
            comparison_epoch: 50,
            eval_episodes: 20,
            seeds: 10,
            shots_sweep: vec![100, 300],
            tasks_sweep: vec![0, 2, 4],
            rain_tasks: 3,
            rain_width: 2,
            rain_height: 2,
            rainfall_mm_per_h: 12.5,
            rain_path_km: 40.0,
            resilience_epochs: 100,
            init_path: None,
            params_path: None,
        }
    }

    /// Full-size 10×10 grid with ten devices.
    pub fn full() -> Self {
        Self {
            profile: "full".into(),
            output_dir: PathBuf::from("runs/full"),
            grid_side_cells: 10,
            num_devices: 10,
            episode_length: 100,
            ref_gain_db: 30.0,
            aoi_max: 100,
            gamma: 0.99,
            num_meta_tasks: 8,
            dataset_size: 500,
            dqn_episodes: 300,
            hidden: vec![128, 128],
            adaptation_epochs: 200,
            shots_sweep: vec![100, 300, 500],
            tasks_sweep: vec![0, 2, 4, 6, 8, 10],
            rain_tasks: 5,
            rain_width: 3,
            rain_height: 3,
            resilience_epochs: 200,
            eval_episodes: 50,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected \"desk\" or \"full\""))),
        }
    }

    /// Resolve `text` on top of its profile, then apply `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut extra = toml::Table::new();
        for o in overrides {
            let (k, v) = parse_override(o)?;
            extra.insert(k, v);
        }
        let profile = match extra.get("profile").or_else(|| table.get("profile")) {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
        };
        let base = Self::profile(&profile)?;
        let mut merged = match toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        let seed_given = table.contains_key("root_seed") || extra.contains_key("root_seed");
        merged.extend(table);
        merged.extend(extra);
        if !seed_given {
            if let Some(s) = env_seed {
                let seed: u64 = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={s:?} is not an unsigned integer")))?;
                merged.insert("root_seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, honoring the seed environment variable.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env_seed = std::env::var(SEED_ENV_VAR).ok();
        Self::from_toml_str(&text, overrides, env_seed.as_deref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min) {
            return fail(format!("need 0 < lambda_min <= lambda_max, got {} and {}", self.lambda_min, self.lambda_max));
        }
        if self.dataset_size == 0 || self.eval_episodes == 0 || self.seeds == 0 {
            return fail("dataset_size, eval_episodes and seeds must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return fail(format!("split_ratio must lie in [0, 1], got {}", self.split_ratio));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden must list at least one positive layer width".into());
        }
        if self.comparison_epoch > self.adaptation_epochs {
            return fail(format!(
                "comparison_epoch {} exceeds adaptation_epochs {}",
                self.comparison_epoch, self.adaptation_epochs
            ));
        }
        if self.shots_sweep.contains(&0) {
            return fail("shots_sweep entries must be positive".into());
        }
        if self.rain_width == 0 || self.rain_height == 0 || self.rain_width > self.grid_side_cells || self.rain_height > self.grid_side_cells {
            return fail("rain rectangle must be non-empty and fit in the grid".into());
        }
        if self.behavior == BehaviorKind::Dqn && self.dqn_episodes == 0 {
            return fail("dqn behavior needs dqn_episodes >= 1".into());
        }
        self.offline_config(LossKind::Cql).validate()?;
        self.meta_config(LossKind::Cql, 0).validate()?;
        self.env_config()?;
        Ok(())
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let env = EnvConfig {
            grid_side_cells: self.grid_side_cells,
            cell_length_m: self.cell_length_m,
            num_devices: self.num_devices,
            uav_height_m: self.uav_height_m,
            ref_gain: db_to_linear(self.ref_gain_db),
            bandwidth_hz: self.bandwidth_hz,
            payload_bits: self.payload_bits,
            noise_power_w: dbm_to_watts(self.noise_power_dbm),
            aoi_max: self.aoi_max,
            device_weights: vec![1.0 / self.num_devices.max(1) as f64; self.num_devices],
            episode_length: self.episode_length,
            device_cells: random_device_cells(self.grid_side_cells, self.num_devices, self.layout_seed)?,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn task(&self, lambda: f64, task_id: impl Into<String>) -> Result<TaskSpec> {
        TaskSpec::new(self.env_config()?, lambda, task_id)
    }

    pub fn mlp_spec(&self, init_seed: u64) -> Result<MlpSpec> {
        let env = self.env_config()?;
        let spec = MlpSpec::for_env(&env, &self.hidden)
            .with_activation(self.activation)
            .with_init(InitScheme::He, init_seed);
        spec.validate()?;
        Ok(spec)
    }

    pub fn td(&self) -> TdConfig {
        TdConfig::new(self.gamma).with_reward_scale(self.reward_scale)
    }

    pub fn offline_config(&self, loss: LossKind) -> OfflineConfig {
        OfflineConfig {
            epochs: self.adaptation_epochs,
            batch_size: self.batch_size,
            td: self.td(),
            alpha: self.alpha,
            loss,
            adam: AdamConfig::new(self.lr),
            target_sync_every: self.target_sync_every,
            updates_per_epoch: (self.updates_per_epoch > 0).then_some(self.updates_per_epoch),
            split: self.cql_split,
        }
    }

    pub fn meta_config(&self, loss: LossKind, seed: u64) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            meta_epochs: self.meta_epochs,
            shots: self.shots,
            inner_steps: self.inner_steps,
            query_batch: self.batch_size,
            loss,
            second_order: self.second_order,
            td: self.td(),
            alpha: self.alpha,
            seed,
        }
    }

    pub fn dqn_config(&self, task: &TaskSpec) -> Result<DqnConfig> {
        let mut c = DqnConfig::for_task(task, self.dqn_episodes);
        c.td = self.td();
        c.adam = AdamConfig::new(self.dqn_lr);
        c.batch_size = self.batch_size;
        c.target_sync_every = self.target_sync_every;
        let total = (self.dqn_episodes * self.episode_length) as u64;
        c.schedule = EpsilonSchedule::over_fraction(1.0, 0.05, total, 0.5)?;
        if self.dqn_export_episode > 0 {
            c.export_after_episode = Some(self.dqn_export_episode);
        }
        Ok(c)
    }

    pub fn init_path(&self) -> PathBuf {
        self.init_path.clone().unwrap_or_else(|| self.output_dir.join("checkpoints/meta_init.bin"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("datasets")
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}
