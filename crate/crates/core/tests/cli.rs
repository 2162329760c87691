use std::path::{Path, PathBuf};
use std::process::Command;

use uavmeta::env::{self, Action, Cell, Move};
use uavmeta::harness::experiments::{eval_seeds, init_seed, rain_tasks, read_metrics, test_task, TrajectoryStep};
use uavmeta::harness::{evaluate_policy, ExperimentConfig};
use uavmeta::nn::io::load_params;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

/// Run the binary on the smoke config with output under `out`.
fn uavmeta(sub: &str, out: &Path, extra: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_uavmeta"))
        .arg(sub)
        .arg(smoke_config())
        .arg("--set")
        .arg(format!("output_dir={}", out.display()))
        .args(extra)
        .output()
        .expect("binary runs");
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn ok(sub: &str, out: &Path, extra: &[&str]) -> String {
    let (code, stdout, stderr) = uavmeta(sub, out, extra);
    assert_eq!(code, 0, "{sub} failed: {stderr}");
    stdout
}

fn smoke_cfg(out: &Path) -> ExperimentConfig {
    ExperimentConfig::load(&smoke_config(), &[format!("output_dir={}", out.display())]).unwrap()
}

#[test]
fn collect_then_meta_train_then_meta_test() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("collect", &out, &[]);
    assert!(out.join("datasets/resolved.toml").is_file());
    let n_sets = std::fs::read_dir(out.join("datasets")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl")).count();
    // two meta tasks, the held-out task, three rain tasks
    assert_eq!(n_sets, 6);

    let printed = ok("meta-train", &out, &[]);
    let init = out.join("checkpoints/meta_init.bin");
    assert_eq!(printed.trim(), init.display().to_string());
    assert!(init.is_file());
    assert!(out.join("meta-train/meta_loss.csv").is_file());
    let rows = read_metrics(&out.join("meta-train/metrics.csv")).unwrap();
    // epoch 0 plus three meta epochs, for each of two tasks
    assert_eq!(rows.len(), 8);

    ok("meta-test", &out, &[]);
    let rows = read_metrics(&out.join("meta-test/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.algorithm == "cql-maml" && r.mean_eval_reward.is_finite()));
    assert!(out.join("meta-test/resolved.toml").is_file());
}

#[test]
fn convergence_writes_all_four_learners() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("convergence", &out, &[]);
    let rows = read_metrics(&out.join("convergence/metrics.csv")).unwrap();
    for alg in ["dqn", "dqn-maml", "cql", "cql-maml"] {
        // two seeds, epochs 0..=3
        assert_eq!(rows.iter().filter(|r| r.algorithm == alg).count(), 8, "{alg}");
    }
}

#[test]
fn saved_checkpoint_reproduces_logged_final_reward() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("train-cql", &out, &[]);
    let cfg = smoke_cfg(&out);
    let task = test_task(&cfg).unwrap();
    let rows = read_metrics(&out.join("train-cql/metrics.csv")).unwrap();
    for seed in 0..cfg.seeds {
        let run_id = format!("cql/full/seed{seed}");
        let last = rows.iter().filter(|r| r.run_id == run_id).max_by_key(|r| r.epoch).unwrap();
        assert_eq!(last.epoch, cfg.adaptation_epochs);
        let spec = cfg.mlp_spec(init_seed(&cfg, seed)).unwrap();
        let path = out.join(format!("train-cql/checkpoints/{run_id}/{}.bin", task.task_id));
        let (params, prov) = load_params(&path, &spec).unwrap();
        assert!(prov.contains(&run_id));
        let e = evaluate_policy(&params, &spec, &task, &eval_seeds(&cfg, seed), None).unwrap();
        assert!((e.mean_reward - last.mean_eval_reward).abs() <= 1e-9 * e.mean_reward.abs().max(1.0));
    }

    // and `evaluate` on seed 0's checkpoint agrees with the same oracle
    let p0 = out.join(format!("train-cql/checkpoints/cql/full/seed0/{}.bin", task.task_id));
    let text = ok("evaluate", &out, &["--params", p0.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let spec = cfg.mlp_spec(init_seed(&cfg, 0)).unwrap();
    let (params, _) = load_params(&p0, &spec).unwrap();
    let e = evaluate_policy(&params, &spec, &task, &eval_seeds(&cfg, 0), None).unwrap();
    assert!((report["evaluation"]["mean_reward"].as_f64().unwrap() - e.mean_reward).abs() < 1e-9 * e.mean_reward.abs().max(1.0));
    assert!(out.join("evaluate/evaluation.json").is_file());
}

#[test]
fn resilience_trajectories_replay_through_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("resilience", &out, &[]);
    let cfg = smoke_cfg(&out);
    let tasks = rain_tasks(&cfg).unwrap();
    assert!(out.join("resilience/rain_tasks.json").is_file());
    for task in &tasks {
        for alg in ["cql", "cql-maml"] {
            let path = out.join(format!("resilience/trajectories/{alg}-{}.jsonl", task.task_id));
            let steps: Vec<TrajectoryStep> = std::fs::read_to_string(&path)
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect();
            assert_eq!(steps.len(), task.env.episode_length);
            let mut s = env::reset(task, eval_seeds(&cfg, 0)[0]);
            for st in &steps {
                let to = Cell::new(st.x, st.y);
                let mv = Move::between(s.uav, to).expect("one-cell move");
                let o = env::step(&s, &Action::new(mv, st.serve), task).unwrap();
                assert_eq!(o.info.in_rain, st.in_rain);
                assert_eq!(o.info.in_rain, task.rain.as_ref().unwrap().contains(to));
                assert!((o.reward - st.reward).abs() <= 1e-9 * o.reward.abs().max(1.0));
                s = o.next_state;
            }
        }
    }
}

#[test]
fn missing_init_is_a_config_error_with_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let (code, _, stderr) = uavmeta("meta-test", &out, &["--init", "/nonexistent/init.bin"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(!out.exists());
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(uavmeta("collect", &out, &["--set", "no_such_key=1"]).0, 2);
    assert_eq!(uavmeta("collect", &out, &["--set", "seeds=0"]).0, 2);
    assert_eq!(uavmeta("no-such-command", &out, &[]).0, 2);
    let o = Command::new(env!("CARGO_BIN_EXE_uavmeta")).args(["convergence", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
