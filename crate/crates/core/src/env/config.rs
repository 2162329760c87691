use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Grid cell coordinates. Serialized as a two-element array `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl From<[usize; 2]> for Cell {
    fn from(v: [usize; 2]) -> Self {
        Cell::new(v[0], v[1])
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

/// Static description of the network: grid, devices, radio constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_side_cells: usize,
    pub cell_length_m: f64,
    pub num_devices: usize,
    pub uav_height_m: f64,
    /// Linear reference channel gain at 1 m.
    pub ref_gain: f64,
    pub bandwidth_hz: f64,
    pub payload_bits: f64,
    /// Linear noise power in watts.
    pub noise_power_w: f64,
    pub aoi_max: u32,
    pub device_weights: Vec<f64>,
    pub episode_length: usize,
    pub device_cells: Vec<Cell>,
}

impl EnvConfig {
    /// Reference radio constants with `K` devices scattered over an `L×L` grid.
    pub fn standard(grid_side_cells: usize, num_devices: usize, episode_length: usize, layout_seed: u64) -> Result<Self> {
        let device_cells = random_device_cells(grid_side_cells, num_devices, layout_seed)?;
        let cfg = Self {
            grid_side_cells,
            cell_length_m: 100.0,
            num_devices,
            uav_height_m: 100.0,
            ref_gain: db_to_linear(30.0),
            bandwidth_hz: 1e6,
            payload_bits: 5e6,
            noise_power_w: dbm_to_watts(-100.0),
            aoi_max: 100,
            device_weights: vec![1.0 / num_devices as f64; num_devices],
            episode_length,
            device_cells,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dimensionless spectral load `M/B` in the exponent of the power law.
    pub fn spectral_load(&self) -> f64 {
        self.payload_bits / self.bandwidth_hz
    }

    pub fn state_dim(&self) -> usize {
        2 + self.num_devices
    }

    pub fn num_actions(&self) -> usize {
        5 * self.num_devices
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x < self.grid_side_cells && c.y < self.grid_side_cells
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_side_cells < 2 {
            return bad("grid_side_cells must be at least 2");
        }
        if self.num_devices < 1 {
            return bad("num_devices must be at least 1");
        }
        if self.episode_length < 1 {
            return bad("episode_length must be at least 1");
        }
        if self.aoi_max < 1 {
            return bad("aoi_max must be at least 1");
        }
        let positive = [
            ("cell_length_m", self.cell_length_m),
            ("uav_height_m", self.uav_height_m),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_power", self.noise_power_w),
            ("ref_gain", self.ref_gain),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.payload_bits.is_nan() || self.payload_bits < 0.0 {
            return bad("payload_bits must be non-negative");
        }
        if self.device_cells.len() != self.num_devices {
            return Err(Error::Config(format!(
                "expected {} device cells, got {}",
                self.num_devices,
                self.device_cells.len()
            )));
        }
        if self.device_weights.len() != self.num_devices {
            return Err(Error::Config(format!(
                "expected {} device weights, got {}",
                self.num_devices,
                self.device_weights.len()
            )));
        }
        if self.device_weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return bad("device weights must be non-negative");
        }
        for (i, c) in self.device_cells.iter().enumerate() {
            if !self.contains(*c) {
                return Err(Error::Config(format!("device {i} at {c:?} lies outside the grid")));
            }
            if self.device_cells[..i].contains(c) {
                return Err(Error::Config(format!("device {i} shares cell {c:?} with another device")));
            }
        }
        Ok(())
    }
}

/// Distinct device cells drawn uniformly without replacement.
pub fn random_device_cells(grid_side_cells: usize, num_devices: usize, seed: u64) -> Result<Vec<Cell>> {
    let cells = grid_side_cells * grid_side_cells;
    if num_devices > cells {
        return Err(Error::Config(format!("{num_devices} devices do not fit in {cells} cells")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, cells, num_devices)
        .into_iter()
        .map(|i| Cell::new(i % grid_side_cells, i / grid_side_cells))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RainRegionRepr {
    cell_min: Cell,
    cell_max: Cell,
    rainfall_mm_per_h: f64,
    fit_phi: f64,
    fit_exponent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path_km: Option<f64>,
}

/// Rectangular heavy-rain area, inclusive on both corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RainRegionRepr", into = "RainRegionRepr")]
pub struct RainRegion {
    cell_min: Cell,
    cell_max: Cell,
    rainfall_mm_per_h: f64,
    fit_phi: f64,
    fit_exponent: f64,
    path_km: Option<f64>,
    attenuation_db_per_km: f64,
}

impl TryFrom<RainRegionRepr> for RainRegion {
    type Error = Error;
    fn try_from(r: RainRegionRepr) -> Result<Self> {
        let mut out = RainRegion::new(r.cell_min, r.cell_max, r.rainfall_mm_per_h)?;
        out.set_fit(r.fit_phi, r.fit_exponent);
        out.path_km = r.path_km;
        Ok(out)
    }
}

impl From<RainRegion> for RainRegionRepr {
    fn from(r: RainRegion) -> Self {
        RainRegionRepr {
            cell_min: r.cell_min,
            cell_max: r.cell_max,
            rainfall_mm_per_h: r.rainfall_mm_per_h,
            fit_phi: r.fit_phi,
            fit_exponent: r.fit_exponent,
            path_km: r.path_km,
        }
    }
}

impl RainRegion {
    pub const DEFAULT_PHI: f64 = 0.0101;
    pub const DEFAULT_EXPONENT: f64 = 1.276;
    pub const DEFAULT_RAINFALL: f64 = 12.5;

    pub fn new(cell_min: Cell, cell_max: Cell, rainfall_mm_per_h: f64) -> Result<Self> {
        if cell_min.x > cell_max.x || cell_min.y > cell_max.y {
            return Err(Error::Config(format!(
                "rain rectangle corners out of order: {cell_min:?} > {cell_max:?}"
            )));
        }
        if rainfall_mm_per_h.is_nan() || rainfall_mm_per_h < 0.0 {
            return Err(Error::Config("rainfall must be non-negative".into()));
        }
        let mut r = Self {
            cell_min,
            cell_max,
            rainfall_mm_per_h,
            fit_phi: Self::DEFAULT_PHI,
            fit_exponent: Self::DEFAULT_EXPONENT,
            path_km: None,
            attenuation_db_per_km: 0.0,
        };
        r.refresh();
        Ok(r)
    }

    fn refresh(&mut self) {
        self.attenuation_db_per_km = self.fit_phi * self.rainfall_mm_per_h.powf(self.fit_exponent);
    }

    pub fn set_fit(&mut self, phi: f64, exponent: f64) {
        self.fit_phi = phi;
        self.fit_exponent = exponent;
        self.refresh();
    }

    pub fn set_rainfall(&mut self, rainfall_mm_per_h: f64) {
        self.rainfall_mm_per_h = rainfall_mm_per_h;
        self.refresh();
    }

    pub fn with_path_km(mut self, path_km: f64) -> Self {
        self.path_km = Some(path_km);
        self
    }

    pub fn cell_min(&self) -> Cell {
        self.cell_min
    }

    pub fn cell_max(&self) -> Cell {
        self.cell_max
    }

    pub fn rainfall_mm_per_h(&self) -> f64 {
        self.rainfall_mm_per_h
    }

    pub fn fit(&self) -> (f64, f64) {
        (self.fit_phi, self.fit_exponent)
    }

    /// Specific attenuation `γ_R = φ·R^φ'` in dB/km.
    pub fn attenuation_db_per_km(&self) -> f64 {
        self.attenuation_db_per_km
    }

    /// Path length through rain; vertical traverse `h/1000` unless overridden.
    pub fn path_km(&self, uav_height_m: f64) -> f64 {
        self.path_km.unwrap_or(uav_height_m / 1000.0)
    }

    pub fn path_override_km(&self) -> Option<f64> {
        self.path_km
    }

    /// Multiplicative linear loss applied to the channel gain inside the region.
    pub fn linear_loss(&self, uav_height_m: f64) -> f64 {
        10f64.powf(-self.attenuation_db_per_km * self.path_km(uav_height_m) / 10.0)
    }

    pub fn contains(&self, c: Cell) -> bool {
        (self.cell_min.x..=self.cell_max.x).contains(&c.x) && (self.cell_min.y..=self.cell_max.y).contains(&c.y)
    }

    pub fn num_cells(&self) -> usize {
        (self.cell_max.x - self.cell_min.x + 1) * (self.cell_max.y - self.cell_min.y + 1)
    }

    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if !env.contains(self.cell_max) {
            return Err(Error::Config(format!(
                "rain rectangle corner {:?} lies outside the {}x{} grid",
                self.cell_max, env.grid_side_cells, env.grid_side_cells
            )));
        }
        Ok(())
    }
}

/// One environment-task: network plus objective trade-off and optional rain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub env: EnvConfig,
    pub lambda_tradeoff: f64,
    pub rain: Option<RainRegion>,
    pub task_id: String,
    pub rng_seed: u64,
}

impl TaskSpec {
    pub fn new(env: EnvConfig, lambda_tradeoff: f64, task_id: impl Into<String>) -> Result<Self> {
        let t = Self {
            env,
            lambda_tradeoff,
            rain: None,
            task_id: task_id.into(),
            rng_seed: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_rain(mut self, rain: RainRegion) -> Result<Self> {
        rain.validate(&self.env)?;
        self.rain = Some(rain);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if !(self.lambda_tradeoff >= 0.0 && self.lambda_tradeoff.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda_tradeoff
            )));
        }
        if let Some(r) = &self.rain {
            r.validate(&self.env)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("task spec serializes");
        hex::encode(Sha256::digest(json))
    }
}
