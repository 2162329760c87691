//! Offline datasets and their line-delimited JSON file format.
//!
//! Line 1 is the header object (`format_version` first). Line 2 holds the
//! support/query index partition. Every following line is one transition
//! `{"s":[..],"a":i,"r":x,"s2":[..],"d":bool}`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, encode_state, Action, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{forward, MlpSpec, ParamVector};
use crate::rl::{epsilon_greedy, train_dqn, DqnConfig, ReplayBuffer, Transition};
use crate::util::{derive_seed, write_atomic};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task_fingerprint: String,
    pub task: TaskSpec,
    pub behavior: String,
    pub num_transitions: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub state_dim: usize,
    pub num_actions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitRecord {
    support: Vec<usize>,
    query: Vec<usize>,
}

/// Which part of a dataset a learner samples from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSplit {
    Full,
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
    support: Vec<usize>,
    query: Vec<usize>,
    all: Vec<usize>,
}

/// Behavior policy used to fill a dataset.
#[derive(Clone, Debug)]
pub enum Behavior {
    /// Uniform random actions.
    Random,
    /// Train an online DQN agent and export the newest replay entries.
    DqnReplay { spec: MlpSpec, config: DqnConfig },
}

impl OfflineDataset {
    /// Build from transitions, splitting by shuffled indices under `seed`.
    pub fn new(task: &TaskSpec, behavior: impl Into<String>, transitions: Vec<Transition>, split_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_ratio) {
            return Err(Error::Config(format!("split ratio must lie in [0, 1], got {split_ratio}")));
        }
        let n = transitions.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
        let n_support = ((n as f64) * split_ratio).round() as usize;
        let mut support = idx[..n_support].to_vec();
        let mut query = idx[n_support..].to_vec();
        support.sort_unstable();
        query.sort_unstable();
        Self::with_split(task, behavior, transitions, split_ratio, seed, support, query)
    }

    /// Build with an explicit partition.
    pub fn with_split(
        task: &TaskSpec,
        behavior: impl Into<String>,
        transitions: Vec<Transition>,
        split_ratio: f64,
        seed: u64,
        support: Vec<usize>,
        query: Vec<usize>,
    ) -> Result<Self> {
        let header = DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            task_fingerprint: task.fingerprint(),
            task: task.clone(),
            behavior: behavior.into(),
            num_transitions: transitions.len(),
            split_ratio,
            seed,
            state_dim: task.env.state_dim(),
            num_actions: task.env.num_actions(),
        };
        let ds = Self {
            all: (0..transitions.len()).collect(),
            header,
            transitions,
            support,
            query,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.num_transitions != self.transitions.len() {
            return Err(Error::Config(format!(
                "header declares {} transitions, found {}",
                h.num_transitions,
                self.transitions.len()
            )));
        }
        if h.state_dim != h.task.env.state_dim() || h.num_actions != h.task.env.num_actions() {
            return Err(Error::Config("header dimensions disagree with its task".into()));
        }
        for t in &self.transitions {
            t.validate(h.state_dim, h.num_actions)?;
        }
        let mut seen = vec![false; self.transitions.len()];
        for &i in self.support.iter().chain(&self.query) {
            if i >= seen.len() || seen[i] {
                return Err(Error::Config(format!("support/query partition is invalid at index {i}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("support and query do not cover every transition".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn support_indices(&self) -> &[usize] {
        &self.support
    }

    pub fn query_indices(&self) -> &[usize] {
        &self.query
    }

    pub fn indices(&self, split: TrainSplit) -> &[usize] {
        match split {
            TrainSplit::Full => &self.all,
            TrainSplit::Support => &self.support,
            TrainSplit::Query => &self.query,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.header.task
    }

    /// Transitions of one split, in index order.
    pub fn split_transitions(&self, split: TrainSplit) -> Vec<Transition> {
        self.indices(split).iter().map(|&i| self.transitions[i].clone()).collect()
    }

    /// Uniform sample with replacement from `split`.
    pub fn sample<'a, R: Rng>(&'a self, split: TrainSplit, n: usize, rng: &mut R) -> Result<Vec<&'a Transition>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::Empty("dataset split"));
        }
        Ok((0..n).map(|_| &self.transitions[idx[rng.gen_range(0..idx.len())]]).collect())
    }

    pub fn check_compatible(&self, spec: &MlpSpec) -> Result<()> {
        if spec.input_dim != self.header.state_dim {
            return Err(Error::dim("network input vs dataset state", self.header.state_dim, spec.input_dim));
        }
        if spec.output_dim != self.header.num_actions {
            return Err(Error::dim("network output vs dataset actions", self.header.num_actions, spec.output_dim));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
        let split = SplitRecord {
            support: self.support.clone(),
            query: self.query.clone(),
        };
        serde_json::to_writer(&mut out, &split).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t).map_err(|e| Error::Config(e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    /// Load and validate; with `expected`, the task fingerprint must match too.
    pub fn load(path: &Path, expected: Option<&TaskSpec>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next_line = |what: &str| -> Result<String> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::io(path, e)),
                None => Err(Error::format(path, format!("missing {what} record"))),
            }
        };
        let head = next_line("header")?;
        let raw: serde_json::Value = serde_json::from_str(&head).map_err(|e| Error::format(path, e.to_string()))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::format(path, format!("unsupported dataset format version {v}"))),
            None => return Err(Error::format(path, "header has no format_version")),
        }
        let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| Error::format(path, e.to_string()))?;
        if header.task_fingerprint != header.task.fingerprint() {
            return Err(Error::format(path, "task fingerprint does not match the embedded task"));
        }
        if let Some(exp) = expected {
            if exp.env.state_dim() != header.state_dim || exp.env.num_actions() != header.num_actions {
                return Err(Error::format(
                    path,
                    format!(
                        "dataset dimensions {}x{} do not match the task ({}x{})",
                        header.state_dim,
                        header.num_actions,
                        exp.env.state_dim(),
                        exp.env.num_actions()
                    ),
                ));
            }
            if exp.fingerprint() != header.task_fingerprint {
                return Err(Error::format(path, "dataset was collected for a different task"));
            }
        }
        let split: SplitRecord =
            serde_json::from_str(&next_line("split")?).map_err(|e| Error::format(path, e.to_string()))?;
        let mut transitions = Vec::with_capacity(header.num_transitions);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?);
        }
        let ds = Self {
            all: (0..transitions.len()).collect(),
            header,
            transitions,
            support: split.support,
            query: split.query,
        };
        ds.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ds)
    }
}

fn rollout_into(
    task: &TaskSpec,
    out: &mut Vec<Transition>,
    target_len: usize,
    seed: u64,
    mut choose: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<()> {
    let k = task.env.num_devices;
    let mut episode = 0u64;
    while out.len() < target_len {
        let mut state = env::reset(task, derive_seed(seed, &format!("episode{episode}")));
        episode += 1;
        loop {
            let obs = encode_state(&state, &task.env);
            let a = choose(&obs)?;
            let o = env::step(&state, &Action::decode(a, k)?, task)?;
            out.push(Transition {
                state: obs,
                action: a,
                reward: o.reward,
                next_state: encode_state(&o.next_state, &task.env),
                done: o.done,
            });
            state = o.next_state;
            if o.done || out.len() >= target_len {
                break;
            }
        }
    }
    Ok(())
}

/// Dataset from an existing replay buffer: the `size` newest entries, topped up
/// with ε-greedy rollouts of `fill` when the buffer is too small.
pub fn from_replay(
    task: &TaskSpec,
    buffer: &ReplayBuffer,
    behavior_id: &str,
    size: usize,
    split_ratio: f64,
    seed: u64,
    fill: Option<(&ParamVector<f64>, &MlpSpec, f64)>,
) -> Result<OfflineDataset> {
    let mut transitions = buffer.most_recent(size);
    if transitions.len() < size {
        let (params, spec, eps) = fill.ok_or_else(|| {
            Error::Config(format!("replay buffer holds {} transitions, {size} requested", transitions.len()))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fill"));
        rollout_into(task, &mut transitions, size, derive_seed(seed, "fill-episodes"), |obs| {
            let q = forward(params, spec, obs)?;
            Ok(epsilon_greedy(&q, eps, &mut rng))
        })?;
    }
    OfflineDataset::new(task, behavior_id, transitions, split_ratio, seed)
}

/// Run `behavior` in `task` and keep exactly `size` transitions.
pub fn collect_dataset(task: &TaskSpec, behavior: &Behavior, size: usize, split_ratio: f64, seed: u64) -> Result<OfflineDataset> {
    if size == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    task.validate()?;
    match behavior {
        Behavior::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-behavior"));
            let n = task.env.num_actions();
            let mut transitions = Vec::with_capacity(size);
            rollout_into(task, &mut transitions, size, derive_seed(seed, "random-episodes"), |_| {
                Ok(rng.gen_range(0..n))
            })?;
            OfflineDataset::new(task, "random", transitions, split_ratio, seed)
        }
        Behavior::DqnReplay { spec, config } => {
            if spec.input_dim != task.env.state_dim() || spec.output_dim != task.env.num_actions() {
                return Err(Error::dim("behavior network vs task actions", task.env.num_actions(), spec.output_dim));
            }
            let run = train_dqn(task, spec, config, derive_seed(seed, "behavior"))?;
            let after = config.export_after_episode.unwrap_or(config.episodes);
            from_replay(
                task,
                &run.buffer,
                &format!("dqn-after-episode-{after}"),
                size,
                split_ratio,
                seed,
                Some((&run.params, spec, config.schedule.end)),
            )
        }
    }
}
