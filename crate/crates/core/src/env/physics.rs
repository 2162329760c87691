//! Line-of-sight channel, transmit power, AoI recursion and the per-step reward.

use super::config::{Cell, EnvConfig, RainRegion};

/// Metric position of a cell center.
pub fn cell_center(c: Cell, cell_length_m: f64) -> (f64, f64) {
    ((c.x as f64 + 0.5) * cell_length_m, (c.y as f64 + 0.5) * cell_length_m)
}

/// Squared horizontal distance between two cell centers, in m².
pub fn distance_sq_m(a: Cell, b: Cell, cell_length_m: f64) -> f64 {
    let (ax, ay) = cell_center(a, cell_length_m);
    let (bx, by) = cell_center(b, cell_length_m);
    (ax - bx).powi(2) + (ay - by).powi(2)
}

/// `g0 / (h² + d²)`, times the rain loss when the UAV sits inside the rain area.
pub fn channel_gain(device: Cell, uav: Cell, cfg: &EnvConfig, rain: Option<&RainRegion>) -> f64 {
    let d2 = distance_sq_m(device, uav, cfg.cell_length_m);
    let g = cfg.ref_gain / (cfg.uav_height_m * cfg.uav_height_m + d2);
    match rain {
        Some(r) if r.contains(uav) => g * r.linear_loss(cfg.uav_height_m),
        _ => g,
    }
}

/// Transmit power in watts needed to deliver the payload over the link.
pub fn tx_power(device: Cell, uav: Cell, cfg: &EnvConfig, rain: Option<&RainRegion>) -> f64 {
    (2f64.powf(cfg.spectral_load()) - 1.0) * cfg.noise_power_w / channel_gain(device, uav, cfg, rain)
}

/// Sum of the powers of all `K` devices for a UAV parked at `uav`.
pub fn total_power(uav: Cell, cfg: &EnvConfig, rain: Option<&RainRegion>) -> f64 {
    cfg.device_cells.iter().map(|d| tx_power(*d, uav, cfg, rain)).sum()
}

/// Served device drops to 1; everyone else ages by one, saturating at `aoi_max`.
pub fn update_aoi(aoi: &[u32], served: usize, aoi_max: u32) -> Vec<u32> {
    aoi.iter()
        .enumerate()
        .map(|(k, &a)| if k == served { 1 } else { (a + 1).min(aoi_max) })
        .collect()
}

/// Components of the instantaneous objective at a post-transition state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTerms {
    /// `Σ_k δ_k A_k`.
    pub weighted_aoi: f64,
    /// `Σ_k P_k` in watts.
    pub power_sum_w: f64,
    /// `-(weighted_aoi + λ/K · power_sum_w)`.
    pub reward: f64,
}

pub fn reward_terms(uav: Cell, aoi: &[u32], cfg: &EnvConfig, lambda: f64, rain: Option<&RainRegion>) -> RewardTerms {
    let weighted_aoi: f64 = aoi.iter().zip(&cfg.device_weights).map(|(&a, &w)| w * a as f64).sum();
    // λ = 0 drops the power term exactly, including any non-finite power.
    let power_sum_w = total_power(uav, cfg, rain);
    let power_term = if lambda == 0.0 {
        0.0
    } else {
        lambda / cfg.num_devices as f64 * power_sum_w
    };
    RewardTerms {
        weighted_aoi,
        power_sum_w,
        reward: -(weighted_aoi + power_term),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::config::{db_to_linear, EnvConfig};

    fn cfg() -> EnvConfig {
        let mut c = EnvConfig::standard(10, 3, 10, 0).unwrap();
        c.ref_gain = 1000.0;
        c.noise_power_w = 1e-13;
        c
    }

    #[test]
    fn gain_same_cell_is_g0_over_h_squared() {
        let c = cfg();
        let g = channel_gain(Cell::new(3, 3), Cell::new(3, 3), &c, None);
        assert!((g - 0.1).abs() < 1e-15);
        assert_eq!(db_to_linear(30.0), 1000.0);
    }

    #[test]
    fn gain_decreases_with_distance() {
        let c = cfg();
        let near = channel_gain(Cell::new(0, 0), Cell::new(0, 0), &c, None);
        let far = channel_gain(Cell::new(0, 0), Cell::new(5, 0), &c, None);
        assert!(near > far);
        assert!((distance_sq_m(Cell::new(0, 0), Cell::new(5, 0), 100.0) - 250_000.0).abs() < 1e-9);
    }

    #[test]
    fn rain_scales_gain_by_linear_loss() {
        let c = cfg();
        let rain = RainRegion::new(Cell::new(2, 2), Cell::new(4, 4), 12.5).unwrap();
        let dry = channel_gain(Cell::new(0, 0), Cell::new(3, 3), &c, None);
        let wet = channel_gain(Cell::new(0, 0), Cell::new(3, 3), &c, Some(&rain));
        let gamma = 0.0101 * 12.5f64.powf(1.276);
        assert!(wet < dry);
        assert!((wet / dry - 10f64.powf(-gamma * 0.1 / 10.0)).abs() < 1e-15);
        // outside the rectangle rain has no effect
        let out = channel_gain(Cell::new(0, 0), Cell::new(0, 0), &c, Some(&rain));
        assert_eq!(out, channel_gain(Cell::new(0, 0), Cell::new(0, 0), &c, None));
    }

    #[test]
    fn power_hand_values() {
        let c = cfg();
        assert_eq!(c.spectral_load(), 5.0);
        let p = tx_power(Cell::new(1, 1), Cell::new(1, 1), &c, None);
        assert!((p - 3.1e-11).abs() < 1e-24, "{p}");
        let mut c1 = c.clone();
        c1.payload_bits = c1.bandwidth_hz;
        let g = channel_gain(Cell::new(1, 1), Cell::new(4, 2), &c1, None);
        let p1 = tx_power(Cell::new(1, 1), Cell::new(4, 2), &c1, None);
        assert_eq!(p1, c1.noise_power_w / g);
        assert!(tx_power(Cell::new(0, 0), Cell::new(0, 0), &c, None) < tx_power(Cell::new(0, 0), Cell::new(5, 0), &c, None));
    }

    #[test]
    fn aoi_update_cases() {
        assert_eq!(update_aoi(&[3, 7, 100], 0, 100), vec![1, 8, 100]);
        assert_eq!(update_aoi(&[1, 1], 1, 100), vec![2, 1]);
        assert_eq!(update_aoi(&update_aoi(&[4, 5], 0, 9), 0, 9)[0], 1);
    }

    #[test]
    fn round_robin_keeps_max_aoi_at_k() {
        let k = 7;
        let mut aoi = vec![1u32; k];
        for step in 0..5 * k {
            aoi = update_aoi(&aoi, step % k, 100);
            if step >= k - 1 {
                assert_eq!(*aoi.iter().max().unwrap(), k as u32);
            }
        }
    }

    #[test]
    fn lambda_zero_reward_is_mean_aoi() {
        let c = cfg();
        let t = reward_terms(Cell::new(0, 0), &[1, 1, 1], &c, 0.0, None);
        assert!((t.reward + 1.0).abs() < 1e-15);
        let t = reward_terms(Cell::new(9, 9), &[100, 100, 100], &c, 0.0, None);
        assert!((t.reward + 100.0).abs() < 1e-12);
    }
}
