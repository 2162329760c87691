//! Grid-world UAV/IoT environment.
//!
//! The UAV moves one cell per step over an `L×L` grid and serves one of `K`
//! ground devices. The state is the UAV cell plus the AoI vector; the reward
//! prices the post-transition AoI and the transmit power of every device.
//! All functions are pure; callers own their [`EnvState`].

mod config;
pub mod physics;

use std::cell::Cell as StdCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{db_to_linear, dbm_to_watts, random_device_cells, Cell, EnvConfig, RainRegion, TaskSpec};
pub use physics::{channel_gain, tx_power, update_aoi, RewardTerms};

use crate::error::{Error, Result};

thread_local! {
    static STEPS: StdCell<u64> = const { StdCell::new(0) };
}

/// Number of [`step`] calls made on the current thread.
///
/// Used to prove that offline training never touches the environment.
pub fn steps_on_this_thread() -> u64 {
    STEPS.with(|s| s.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
    Right,
    Left,
    Hover,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Up, Move::Down, Move::Right, Move::Left, Move::Hover];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Move::Up => (0, 1),
            Move::Down => (0, -1),
            Move::Right => (1, 0),
            Move::Left => (-1, 0),
            Move::Hover => (0, 0),
        }
    }

    /// The move that takes `from` to `to`, if they are equal or 4-adjacent.
    pub fn between(from: Cell, to: Cell) -> Option<Move> {
        let d = (to.x as i64 - from.x as i64, to.y as i64 - from.y as i64);
        Move::ALL.into_iter().find(|m| m.delta() == d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub mv: Move,
    pub serve: usize,
}

impl Action {
    pub fn new(mv: Move, serve: usize) -> Self {
        Self { mv, serve }
    }

    /// Flat index `move · K + serve` in `[0, 5K)`.
    pub fn encode(self, num_devices: usize) -> usize {
        self.mv.index() * num_devices + self.serve
    }

    pub fn decode(index: usize, num_devices: usize) -> Result<Self> {
        if index >= 5 * num_devices {
            return Err(Error::dim("action index", 5 * num_devices, index));
        }
        Ok(Self {
            mv: Move::ALL[index / num_devices],
            serve: index % num_devices,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub uav: Cell,
    pub aoi: Vec<u32>,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Unweighted `Σ_k A_k` after the update.
    pub aoi_sum: f64,
    /// `Σ_k δ_k A_k` after the update.
    pub weighted_aoi: f64,
    pub power_sum_w: f64,
    pub in_rain: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Start of an episode: UAV uniformly placed, every AoI at 1.
pub fn reset(task: &TaskSpec, seed: u64) -> EnvState {
    let l = task.env.grid_side_cells;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.gen_range(0..l * l);
    EnvState {
        uav: Cell::new(idx % l, idx / l),
        aoi: vec![1; task.env.num_devices],
        step_index: 0,
    }
}

/// One-cell move; moves that would leave the grid keep the UAV in place.
pub fn apply_move(cell: Cell, mv: Move, grid_side_cells: usize) -> Cell {
    let (dx, dy) = mv.delta();
    let x = cell.x as i64 + dx;
    let y = cell.y as i64 + dy;
    let l = grid_side_cells as i64;
    if (0..l).contains(&x) && (0..l).contains(&y) {
        Cell::new(x as usize, y as usize)
    } else {
        cell
    }
}

fn check_action(action: &Action, cfg: &EnvConfig) -> Result<()> {
    if action.serve >= cfg.num_devices {
        return Err(Error::dim("served device", cfg.num_devices, action.serve));
    }
    Ok(())
}

/// Reward of taking `action` in `state`, priced at the post-transition state.
pub fn reward(state: &EnvState, action: &Action, task: &TaskSpec) -> Result<f64> {
    check_action(action, &task.env)?;
    let uav = apply_move(state.uav, action.mv, task.env.grid_side_cells);
    let aoi = update_aoi(&state.aoi, action.serve, task.env.aoi_max);
    Ok(physics::reward_terms(uav, &aoi, &task.env, task.lambda_tradeoff, task.rain.as_ref()).reward)
}

pub fn step(state: &EnvState, action: &Action, task: &TaskSpec) -> Result<StepOutcome> {
    let cfg = &task.env;
    if state.step_index >= cfg.episode_length {
        return Err(Error::EpisodeDone(state.step_index));
    }
    check_action(action, cfg)?;
    STEPS.with(|s| s.set(s.get() + 1));
    let uav = apply_move(state.uav, action.mv, cfg.grid_side_cells);
    let aoi = update_aoi(&state.aoi, action.serve, cfg.aoi_max);
    let terms = physics::reward_terms(uav, &aoi, cfg, task.lambda_tradeoff, task.rain.as_ref());
    let in_rain = task.rain.as_ref().is_some_and(|r| r.contains(uav));
    let aoi_sum = aoi.iter().map(|&a| a as f64).sum();
    let next_state = EnvState {
        uav,
        aoi,
        step_index: state.step_index + 1,
    };
    let done = next_state.step_index == cfg.episode_length;
    Ok(StepOutcome {
        next_state,
        reward: terms.reward,
        done,
        info: StepInfo {
            aoi_sum,
            weighted_aoi: terms.weighted_aoi,
            power_sum_w: terms.power_sum_w,
            in_rain,
        },
    })
}

/// Min-max scaled observation `[x, y, A_1..A_K]`, every entry in `[0, 1]`.
pub fn encode_state(state: &EnvState, cfg: &EnvConfig) -> Vec<f64> {
    let span = (cfg.grid_side_cells - 1) as f64;
    let mut v = Vec::with_capacity(cfg.state_dim());
    v.push(state.uav.x as f64 / span);
    v.push(state.uav.y as f64 / span);
    v.extend(state.aoi.iter().map(|&a| a as f64 / cfg.aoi_max as f64));
    v
}

/// Inverse of [`encode_state`] for the integer fields; the step index is not encoded.
pub fn decode_state(vec: &[f64], cfg: &EnvConfig) -> Result<EnvState> {
    if vec.len() != cfg.state_dim() {
        return Err(Error::dim("state vector", cfg.state_dim(), vec.len()));
    }
    let span = (cfg.grid_side_cells - 1) as f64;
    Ok(EnvState {
        uav: Cell::new((vec[0] * span).round() as usize, (vec[1] * span).round() as usize),
        aoi: vec[2..].iter().map(|a| (a * cfg.aoi_max as f64).round() as u32).collect(),
        step_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec::new(EnvConfig::standard(5, 4, 10, 2).unwrap(), 300.0, "t").unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_fresh() {
        let t = task();
        let s = reset(&t, 0);
        assert!(t.env.contains(s.uav));
        assert_eq!(s.aoi, vec![1, 1, 1, 1]);
        assert_eq!(s.step_index, 0);
        assert_eq!(s, reset(&t, 0));
    }

    #[test]
    fn moves_follow_the_five_cases() {
        assert_eq!(apply_move(Cell::new(5, 5), Move::Up, 10), Cell::new(5, 6));
        assert_eq!(apply_move(Cell::new(5, 5), Move::Down, 10), Cell::new(5, 4));
        assert_eq!(apply_move(Cell::new(5, 5), Move::Right, 10), Cell::new(6, 5));
        assert_eq!(apply_move(Cell::new(5, 5), Move::Left, 10), Cell::new(4, 5));
        assert_eq!(apply_move(Cell::new(3, 3), Move::Hover, 10), Cell::new(3, 3));
        assert_eq!(apply_move(Cell::new(0, 0), Move::Down, 10), Cell::new(0, 0));
        assert_eq!(apply_move(Cell::new(9, 4), Move::Right, 10), Cell::new(9, 4));
    }

    #[test]
    fn action_index_bijection() {
        for k in 1..6 {
            for i in 0..5 * k {
                assert_eq!(Action::decode(i, k).unwrap().encode(k), i);
            }
            assert!(Action::decode(5 * k, k).is_err());
        }
    }

    #[test]
    fn step_composes_move_and_aoi() {
        let t = task();
        let s = EnvState {
            uav: Cell::new(2, 2),
            aoi: vec![3, 1, 4, 2],
            step_index: 0,
        };
        let out = step(&s, &Action::new(Move::Hover, 2), &t).unwrap();
        assert_eq!(out.next_state.aoi, update_aoi(&s.aoi, 2, 100));
        assert_eq!(out.next_state.uav, s.uav);
        assert_eq!(out.reward, reward(&s, &Action::new(Move::Hover, 2), &t).unwrap());
        assert!(!out.done);
        assert!(!out.info.in_rain);
    }

    #[test]
    fn stepping_a_finished_episode_is_an_error() {
        let t = task();
        let mut s = reset(&t, 4);
        for _ in 0..t.env.episode_length {
            let out = step(&s, &Action::new(Move::Left, 0), &t).unwrap();
            s = out.next_state;
            assert_eq!(out.done, s.step_index == t.env.episode_length);
        }
        assert!(matches!(step(&s, &Action::new(Move::Left, 0), &t), Err(Error::EpisodeDone(10))));
        let fresh = reset(&t, 4);
        assert!(step(&fresh, &Action::new(Move::Left, 4), &t).is_err());
    }

    #[test]
    fn encode_corners() {
        let t = task();
        let lo = EnvState {
            uav: Cell::new(0, 0),
            aoi: vec![1; 4],
            step_index: 0,
        };
        assert_eq!(encode_state(&lo, &t.env), vec![0.0, 0.0, 0.01, 0.01, 0.01, 0.01]);
        let hi = EnvState {
            uav: Cell::new(4, 4),
            aoi: vec![100; 4],
            step_index: 0,
        };
        assert!(encode_state(&hi, &t.env).iter().all(|&v| v == 1.0));
        assert!(decode_state(&[0.0; 3], &t.env).is_err());
    }

    #[test]
    fn step_counter_counts_steps() {
        let t = task();
        let before = steps_on_this_thread();
        let s = reset(&t, 1);
        let _ = step(&s, &Action::new(Move::Up, 0), &t).unwrap();
        assert_eq!(steps_on_this_thread(), before + 1);
    }

    #[test]
    fn move_between_neighbours() {
        assert_eq!(Move::between(Cell::new(1, 1), Cell::new(1, 2)), Some(Move::Up));
        assert_eq!(Move::between(Cell::new(1, 1), Cell::new(1, 1)), Some(Move::Hover));
        assert_eq!(Move::between(Cell::new(1, 1), Cell::new(3, 1)), None);
    }
}
