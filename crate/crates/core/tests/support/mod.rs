//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uavmeta::env::{self, db_to_linear, physics, Action, Cell, EnvConfig, EnvState, Move, TaskSpec};
use uavmeta::meta::{maml_gradient, meta_train, MetaConfig, QObjective, TaskSet};
use uavmeta::nn::{logsumexp, Activation, AdamConfig, AdamState, InitScheme, MlpSpec, ParamVector};
use uavmeta::offline::{cql_loss, train_cql, OfflineConfig, OfflineDataset};
use uavmeta::rl::loss::QLossWeights;
use uavmeta::rl::{dqn_loss, train_dqn, DqnConfig, EpsilonSchedule, GreedyQ, TdConfig, Transition};

/// Worst coordinate-wise relative error between `grad` and central differences of `f`.
///
/// Coordinates whose magnitude is below `floor` are compared on an absolute
/// scale of `floor`.
pub fn fd_max_rel_error(f: &dyn Fn(&ParamVector<f64>) -> f64, w: &ParamVector<f64>, grad: &ParamVector<f64>, h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp.values_mut()[i] += h;
        let mut wm = w.clone();
        wm.values_mut()[i] -= h;
        let fd = (f(&wp) - f(&wm)) / (2.0 * h);
        let a = grad.values()[i];
        let scale = a.abs().max(fd.abs()).max(floor);
        worst = worst.max((a - fd).abs() / scale);
    }
    worst
}

/// 3 → 8 → 6 → 5 network, 121 parameters.
pub fn fd_spec(activation: Activation, seed: u64) -> MlpSpec {
    MlpSpec::new(3, 5)
        .with_hidden(&[8, 6])
        .with_activation(activation)
        .with_init(InitScheme::He, seed)
}

pub fn random_batch(n: usize, state_dim: usize, num_actions: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Transition {
            state: (0..state_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            action: rng.gen_range(0..num_actions),
            reward: rng.gen_range(-3.0..0.0),
            next_state: (0..state_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            done: rng.gen_bool(0.2),
        })
        .collect()
}

pub const FD_TOL: f64 = 1e-4;
pub const FD_H: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

pub fn refs(b: &[Transition]) -> Vec<&Transition> {
    b.iter().collect()
}

/// FD error of `dqn_loss` (`alpha = None`) or `cql_loss` on a 121-parameter net.
pub fn q_loss_fd_error(act: Activation, seed: u64, gamma: f64, alpha: Option<f64>) -> f64 {
    let spec = fd_spec(act, seed);
    let w = spec.init_params::<f64>();
    let target = fd_spec(act, seed ^ 0x5a5a).init_params::<f64>();
    let batch = random_batch(12, 3, 5, seed);
    let b = refs(&batch);
    let td = TdConfig::new(gamma);
    let loss = |p: &ParamVector<f64>| match alpha {
        None => dqn_loss(&b, p, &target, &spec, &td).unwrap(),
        Some(a) => cql_loss(&b, p, &target, &spec, &td, a).unwrap(),
    };
    let g = loss(&w).1;
    fd_max_rel_error(&|p| loss(p).0, &w, &g, FD_H, FD_FLOOR)
}

/// FD error of the second-order meta-gradient through `steps` inner steps, frozen target.
pub fn meta_fd_error(steps: usize) -> f64 {
    let spec = fd_spec(Activation::Tanh, 5);
    let w0 = spec.init_params::<f64>();
    let target = fd_spec(Activation::Tanh, 6).init_params::<f64>();
    let support_b = random_batch(10, 3, 5, 1);
    let query_b = random_batch(10, 3, 5, 2);
    let td = TdConfig::new(0.9);
    let weights = QLossWeights::cql(1.0);
    let support = QObjective::new(refs(&support_b), &target, &spec, td, weights);
    let query = QObjective::new(refs(&query_b), &target, &spec, td, weights);
    let (_, g) = maml_gradient(&support, &query, &w0, 0.1, steps, true).unwrap();
    let f = |p: &ParamVector<f64>| maml_gradient(&support, &query, p, 0.1, steps, false).unwrap().0;
    fd_max_rel_error(&f, &w0, &g, FD_H, FD_FLOOR)
}

/// Worst `|step / (-lr · sign g) - 1|` of the 10⁴-th Adam step under a constant gradient.
pub fn adam_sign_error() -> f64 {
    let lr = 1e-3;
    let g = ParamVector::flat(vec![0.3f64, -2.0, 5e-3]);
    let mut p = ParamVector::flat(vec![0.0; 3]);
    let mut adam = AdamState::for_params(&p, AdamConfig::new(lr));
    let mut before = p.clone();
    for _ in 0..10_000 {
        before = p.clone();
        adam.update(&mut p, &g).unwrap();
    }
    (0..3)
        .map(|i| ((p.values()[i] - before.values()[i]) / (-lr * g.values()[i].signum()) - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn logsumexp_error() -> f64 {
    let v = logsumexp(&[1000.0f64, 1000.5]).unwrap();
    (v - (1000.5 + (1.0 + (-0.5f64).exp()).ln())).abs()
}

/// Reward recomputed from first principles for a logged (state, action) pair.
pub fn replay_reward(task: &TaskSpec, s: &EnvState, idx: usize) -> f64 {
    let e = &task.env;
    let k = e.num_devices;
    let (mv, serve) = (idx / k, idx % k);
    let (dx, dy) = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0), (0, 0)][mv];
    let (nx, ny) = (s.uav.x as i64 + dx, s.uav.y as i64 + dy);
    let l = e.grid_side_cells as i64;
    let (ux, uy) = if nx < 0 || ny < 0 || nx >= l || ny >= l { (s.uav.x as f64, s.uav.y as f64) } else { (nx as f64, ny as f64) };
    let mut aoi_term = 0.0;
    let mut power = 0.0;
    for d in 0..k {
        let a = if d == serve { 1 } else { (s.aoi[d] + 1).min(e.aoi_max) };
        aoi_term += e.device_weights[d] * a as f64;
        let c = e.device_cells[d];
        let dist2 = ((ux - c.x as f64) * e.cell_length_m).powi(2) + ((uy - c.y as f64) * e.cell_length_m).powi(2);
        let g = e.ref_gain / (e.uav_height_m.powi(2) + dist2);
        power += (2f64.powf(e.payload_bits / e.bandwidth_hz) - 1.0) * e.noise_power_w / g;
    }
    -(aoi_term + task.lambda_tradeoff / k as f64 * power)
}

/// Worst relative gap between logged rewards and [`replay_reward`], `λ = 300`, `K = 4`.
pub fn reward_replay_error(episodes: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..episodes {
        let mut e = EnvConfig::standard(6, 4, 40, seed).unwrap();
        e.aoi_max = 10;
        e.ref_gain = db_to_linear(-40.0);
        let task = TaskSpec::new(e, 300.0, "replay").unwrap();
        for (s, idx, r) in scripted_episode(&task, seed, seed + 7) {
            let o = replay_reward(&task, &s, idx);
            worst = worst.max((r - o).abs() / o.abs().max(1.0));
        }
    }
    worst
}

// ---------------------------------------------------------------- tabular

/// 2×2 grid, one device in a corner, AoI capped at 5.
pub fn tabular_task() -> TaskSpec {
    let mut env = EnvConfig::standard(2, 1, 10, 0).unwrap();
    env.device_cells = vec![Cell::new(0, 0)];
    env.aoi_max = 5;
    env.ref_gain = db_to_linear(-40.0);
    TaskSpec::new(env, 30_000.0, "tabular").unwrap()
}

pub const TABULAR_GAMMA: f64 = 0.9;

fn tabular_cells(l: usize) -> Vec<Cell> {
    (0..l).flat_map(|y| (0..l).map(move |x| Cell::new(x, y))).collect()
}

/// Reward of landing in `c`, written out from the channel and power formulas.
fn tabular_reward(task: &TaskSpec, c: Cell) -> f64 {
    let e = &task.env;
    let dev = e.device_cells[0];
    let dx = (c.x as f64 - dev.x as f64) * e.cell_length_m;
    let dy = (c.y as f64 - dev.y as f64) * e.cell_length_m;
    let gain = e.ref_gain / (e.uav_height_m.powi(2) + dx * dx + dy * dy);
    let power = (2f64.powf(e.payload_bits / e.bandwidth_hz) - 1.0) * e.noise_power_w / gain;
    // one device served every step keeps its age at 1
    -(1.0 + task.lambda_tradeoff * power)
}

fn tabular_move(c: Cell, a: usize, l: usize) -> Cell {
    let (dx, dy): (i64, i64) = [(0, 1), (0, -1), (1, 0), (-1, 0), (0, 0)][a];
    let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
    if x < 0 || y < 0 || x >= l as i64 || y >= l as i64 {
        c
    } else {
        Cell::new(x as usize, y as usize)
    }
}

/// Optimal action sets of the discounted tabular MDP, by value iteration to 1e-10.
pub fn value_iteration_optimal_actions(task: &TaskSpec, gamma: f64) -> Vec<(Cell, Vec<usize>)> {
    let l = task.env.grid_side_cells;
    let cells = tabular_cells(l);
    let idx = |c: Cell| c.y * l + c.x;
    let mut v = vec![0.0; cells.len()];
    loop {
        let next: Vec<f64> = cells
            .iter()
            .map(|&c| {
                (0..5)
                    .map(|a| {
                        let c2 = tabular_move(c, a, l);
                        tabular_reward(task, c2) + gamma * v[idx(c2)]
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-10 {
            break;
        }
    }
    cells
        .iter()
        .map(|&c| {
            let q: Vec<f64> = (0..5)
                .map(|a| {
                    let c2 = tabular_move(c, a, l);
                    tabular_reward(task, c2) + gamma * v[idx(c2)]
                })
                .collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (c, (0..5).filter(|&a| q[a] >= best - 1e-9).collect())
        })
        .collect()
}

/// Cells where the greedy action of `params` falls outside the optimal set.
pub fn tabular_mismatches(params: &ParamVector<f64>, spec: &MlpSpec, task: &TaskSpec, optimal: &[(Cell, Vec<usize>)]) -> Vec<Cell> {
    let policy = GreedyQ::new(params, spec);
    optimal
        .iter()
        .filter(|(c, set)| {
            let s = EnvState {
                uav: *c,
                aoi: vec![1],
                step_index: 0,
            };
            !set.contains(&policy.action_index(&s, task).unwrap())
        })
        .map(|(c, _)| *c)
        .collect()
}

pub fn tabular_spec() -> MlpSpec {
    MlpSpec::new(3, 5).with_hidden(&[32]).with_init(InitScheme::He, 11)
}

pub fn tabular_td() -> TdConfig {
    TdConfig::new(TABULAR_GAMMA).with_reward_scale(0.1)
}

pub fn train_tabular_dqn(task: &TaskSpec, seed: u64) -> ParamVector<f64> {
    let spec = tabular_spec();
    let mut cfg = DqnConfig::for_task(task, 300);
    cfg.td = tabular_td();
    cfg.adam.learning_rate = 3e-3;
    cfg.batch_size = 32;
    cfg.target_sync_every = 50;
    cfg.schedule = EpsilonSchedule::over_fraction(1.0, 0.1, 3000, 0.5).unwrap();
    train_dqn(task, &spec, &cfg, seed).unwrap().params
}

/// Every (cell, action) pair once, never terminal.
pub fn exhaustive_dataset(task: &TaskSpec) -> OfflineDataset {
    let l = task.env.grid_side_cells;
    let mut transitions = Vec::new();
    for c in tabular_cells(l) {
        let s = EnvState {
            uav: c,
            aoi: vec![1],
            step_index: 0,
        };
        for m in Move::ALL {
            let a = Action::new(m, 0);
            let out = env::step(&s, &a, task).unwrap();
            transitions.push(Transition {
                state: env::encode_state(&s, &task.env),
                action: a.encode(1),
                reward: out.reward,
                next_state: env::encode_state(&out.next_state, &task.env),
                done: false,
            });
        }
    }
    OfflineDataset::new(task, "exhaustive", transitions, 1.0, 0).unwrap()
}

pub fn train_tabular_cql(task: &TaskSpec, seed: u64) -> ParamVector<f64> {
    let spec = tabular_spec();
    let ds = exhaustive_dataset(task);
    let cfg = OfflineConfig {
        epochs: 4000,
        batch_size: 64,
        td: tabular_td(),
        adam: AdamConfig::new(3e-3),
        target_sync_every: 50,
        ..OfflineConfig::default()
    };
    train_cql(&ds, &spec.init_params(), &spec, &cfg, seed, &mut |_, _| Ok(())).unwrap().params
}

// ---------------------------------------------------------------- environment sweeps

pub fn sweep_task(seed: u64) -> TaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.gen_range(2..=6);
    let k = rng.gen_range(1..=4.min(l * l));
    let mut env = EnvConfig::standard(l, k, rng.gen_range(1..=30), seed).unwrap();
    env.aoi_max = rng.gen_range(1..=12);
    TaskSpec::new(env, rng.gen_range(0.0..1000.0), format!("sweep-{seed}")).unwrap()
}

/// Count of invariant violations over `steps` uniformly random actions.
pub fn random_step_violations(steps: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut done = 0;
    while done < steps {
        let task = sweep_task(rng.gen());
        let e = &task.env;
        let mut s = env::reset(&task, rng.gen());
        loop {
            let a = Action::decode(rng.gen_range(0..e.num_actions()), e.num_devices).unwrap();
            let out = env::step(&s, &a, &task).unwrap();
            let n = &out.next_state;
            let ok = e.contains(n.uav)
                && n.aoi.len() == e.num_devices
                && n.aoi.iter().all(|&x| (1..=e.aoi_max).contains(&x))
                && n.aoi[a.serve] == 1
                && n.step_index == s.step_index + 1
                && n.step_index <= e.episode_length
                && out.reward.is_finite()
                && out.reward <= 0.0
                && (n.uav.x as i64 - s.uav.x as i64).abs() + (n.uav.y as i64 - s.uav.y as i64).abs() <= 1;
            bad += !ok as usize;
            done += 1;
            s = out.next_state;
            if out.done || done >= steps {
                break;
            }
        }
    }
    bad
}

/// Violations of strict distance monotonicity of gain and power over random geometry pairs.
pub fn monotonicity_violations(pairs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut checked = 0;
    while checked < pairs {
        let l = rng.gen_range(2..=12);
        let mut e = EnvConfig::standard(l, 1, 10, 0).unwrap();
        e.cell_length_m = rng.gen_range(10.0..500.0);
        e.uav_height_m = rng.gen_range(10.0..500.0);
        let mut cell = || Cell::new(rng.gen_range(0..l), rng.gen_range(0..l));
        let (dev, a, b) = (cell(), cell(), cell());
        let sq = |c: Cell| (c.x as i64 - dev.x as i64).pow(2) + (c.y as i64 - dev.y as i64).pow(2);
        let (da, db) = (sq(a), sq(b));
        if da == db {
            continue;
        }
        let (near, far) = if da < db { (a, b) } else { (b, a) };
        let ok = physics::channel_gain(dev, near, &e, None) > physics::channel_gain(dev, far, &e, None)
            && physics::tx_power(dev, near, &e, None) < physics::tx_power(dev, far, &e, None);
        bad += !ok as usize;
        checked += 1;
    }
    bad
}

/// A full episode of seeded random actions, as (state, action, reward) triples.
pub fn scripted_episode(task: &TaskSpec, reset_seed: u64, action_seed: u64) -> Vec<(EnvState, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut s = env::reset(task, reset_seed);
    let mut out = Vec::new();
    loop {
        let idx = rng.gen_range(0..task.env.num_actions());
        let a = Action::decode(idx, task.env.num_devices).unwrap();
        let o = env::step(&s, &a, task).unwrap();
        out.push((s.clone(), idx, o.reward));
        s = o.next_state;
        if o.done {
            return out;
        }
    }
}

pub fn determinism_holds(cases: u64) -> bool {
    (0..cases).all(|i| {
        let t = sweep_task(i);
        scripted_episode(&t, i, 100 + i) == scripted_episode(&t, i, 100 + i)
    })
}

// ---------------------------------------------------------------- purity

/// A small desk-like task with a random-behavior dataset.
pub fn purity_fixture(n_tasks: usize) -> (Vec<OfflineDataset>, MlpSpec) {
    let env = EnvConfig::standard(4, 3, 20, 5).unwrap();
    let spec = MlpSpec::for_env(&env, &[16]).with_init(InitScheme::He, 1);
    let sets = (0..n_tasks)
        .map(|i| {
            let task = TaskSpec::new(env.clone(), 50.0 * (i + 1) as f64, format!("p{i}")).unwrap();
            uavmeta::offline::collect_dataset(&task, &uavmeta::offline::Behavior::Random, 80, 0.5, i as u64).unwrap()
        })
        .collect();
    (sets, spec)
}

/// Environment steps taken by training proper and by the evaluation hook of
/// `train_cql` and `meta_train`: `(train_cql_outside, meta_outside, hook_steps)`.
pub fn purity_counts() -> (u64, u64, u64) {
    let (sets, spec) = purity_fixture(3);
    let hook_task = sets[0].task().clone();
    let hook_steps = std::cell::Cell::new(0u64);
    let mut hook = |_: usize, p: &ParamVector<f64>| -> uavmeta::Result<()> {
        let before = env::steps_on_this_thread();
        uavmeta::harness::evaluate_policy(p, &spec, &hook_task, &[1, 2], None)?;
        hook_steps.set(hook_steps.get() + env::steps_on_this_thread() - before);
        Ok(())
    };
    let cfg = OfflineConfig {
        epochs: 20,
        ..OfflineConfig::default()
    };
    let s0 = env::steps_on_this_thread();
    train_cql(&sets[0], &spec.init_params(), &spec, &cfg, 3, &mut hook).unwrap();
    let cql_total = env::steps_on_this_thread() - s0;
    let cql_hook = hook_steps.get();

    let set = TaskSet::new("purity", sets.clone()).unwrap();
    let mcfg = MetaConfig {
        meta_epochs: 10,
        shots: 16,
        query_batch: 16,
        ..MetaConfig::default()
    };
    let s1 = env::steps_on_this_thread();
    meta_train(&set, &spec, &mcfg, &mut hook).unwrap();
    let meta_total = env::steps_on_this_thread() - s1;
    let meta_hook = hook_steps.get() - cql_hook;
    (cql_total - cql_hook, meta_total - meta_hook, hook_steps.get())
}
