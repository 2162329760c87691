//! Transitions, replay, exploration, TD losses and the online DQN loop.

mod dqn;
pub mod loss;
pub mod policy;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dqn::{train_dqn, DqnConfig, DqnRun, EpisodeLog};
pub use loss::{dqn_loss, td_target, TdConfig};
pub use policy::{run_episode, EpisodeStats, GreedyQ, Policy};

use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::scalar::Scalar;

/// One logged `(s, a, r, s', done)` record with encoded state vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: Vec<f64>,
    #[serde(rename = "d")]
    pub done: bool,
}

impl Transition {
    pub fn validate(&self, state_dim: usize, num_actions: usize) -> Result<()> {
        if self.state.len() != state_dim {
            return Err(Error::dim("transition state", state_dim, self.state.len()));
        }
        if self.next_state.len() != state_dim {
            return Err(Error::dim("transition next state", state_dim, self.next_state.len()));
        }
        if self.action >= num_actions {
            return Err(Error::dim("transition action", num_actions, self.action));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
    }

    /// Insert, returning the evicted oldest item when full.
    pub fn push(&mut self, t: Transition) -> Option<Transition> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(t);
        self.inserted += 1;
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng>(&'a self, rng: &mut R, n: usize) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }

    /// The `n` newest transitions, oldest first.
    pub fn most_recent(&self, n: usize) -> Vec<Transition> {
        let skip = self.items.len().saturating_sub(n);
        self.items.iter().skip(skip).cloned().collect()
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, decay_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || end > start {
            return Err(Error::Config(format!(
                "epsilon schedule needs 0 <= end <= start <= 1, got {start} -> {end}"
            )));
        }
        Ok(Self { start, end, decay_steps })
    }

    /// Decay over the first `fraction` of `total_steps`.
    pub fn over_fraction(start: f64, end: f64, total_steps: u64, fraction: f64) -> Result<Self> {
        Self::new(start, end, (total_steps as f64 * fraction).round() as u64)
    }

    pub fn value(&self, t: u64) -> f64 {
        if t >= self.decay_steps {
            return self.end;
        }
        let frac = t as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Uniform random index with probability `epsilon`, else the greedy index.
pub fn epsilon_greedy<F: Scalar, R: Rng>(q_values: &[F], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tr(i: usize) -> Transition {
        Transition {
            state: vec![i as f64],
            action: 0,
            reward: -(i as f64),
            next_state: vec![0.0],
            done: false,
        }
    }

    #[test]
    fn replay_evicts_fifo() {
        let mut b = ReplayBuffer::new(5);
        let mut evicted = Vec::new();
        for i in 0..8 {
            if let Some(t) = b.push(tr(i)) {
                evicted.push(t.state[0] as usize);
            }
        }
        assert_eq!(evicted, vec![0, 1, 2]);
        assert_eq!(b.len(), 5);
        assert_eq!(b.total_inserted(), 8);
        let recent: Vec<usize> = b.most_recent(2).iter().map(|t| t.state[0] as usize).collect();
        assert_eq!(recent, vec![6, 7]);
        assert_eq!(b.most_recent(100).len(), 5);
    }

    #[test]
    fn epsilon_schedule_shape() {
        let s = EpsilonSchedule::new(1.0, 0.05, 100).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(100), 0.05);
        assert_eq!(s.value(10_000), 0.05);
        let mut prev = 1.0;
        for t in 0..200 {
            let e = s.value(t);
            assert!(e <= prev && (0.0..=1.0).contains(&e));
            prev = e;
        }
        assert!(EpsilonSchedule::new(0.1, 0.5, 10).is_err());
    }

    #[test]
    fn greedy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epsilon_greedy(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[5.0, 5.0, 1.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // χ² goodness of fit, 9 degrees of freedom; 27.88 is the 0.999 quantile.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = [0.0, 9.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let n = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[epsilon_greedy(&q, 1.0, &mut rng)] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn transition_validation() {
        let t = Transition {
            state: vec![0.0; 3],
            action: 4,
            reward: 0.0,
            next_state: vec![0.0; 3],
            done: true,
        };
        assert!(t.validate(3, 5).is_ok());
        assert!(t.validate(3, 4).is_err());
        assert!(t.validate(2, 5).is_err());
    }
}
