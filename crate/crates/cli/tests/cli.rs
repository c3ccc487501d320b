use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softgrad::agent::{DirSink, TrainingCheckpoint};
use softgrad::Checkpoint;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_softgrad"))
}

fn bandit_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bandit.conf")
}

/// Keeps bandit runs to a second or two.
const QUICK: [&str; 8] = [
    "hidden_sizes=8,8",
    "warmup=100",
    "total_env_steps=140",
    "batch_size=16",
    "action_samples=4",
    "eval_interval=20",
    "eval_episodes=3",
    "log_interval=20",
];

fn train(out: &Path, seed: u64, extra: &[&str]) -> Output {
    bin()
        .arg("train")
        .arg("--config")
        .arg(bandit_conf())
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .args(QUICK)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn eval_count(dir: &Path) -> usize {
    fs::read_to_string(dir.join(DirSink::METRICS))
        .unwrap()
        .lines()
        .filter(|l| l.contains(r#""kind":"eval""#))
        .count()
}

#[test]
fn bandit_training_writes_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = train(&run, 1, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(eval_count(&run) >= 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["env"], "continuous-bandit");
    let last = PathBuf::from(manifest["final_checkpoint"].as_str().unwrap());
    let ckpt = TrainingCheckpoint::load(&last).unwrap();
    assert_eq!(ckpt.env_step, 140);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .env("SOFTGRAD_OUT", tmp.path())
        .arg("train")
        .arg("--config")
        .arg(bandit_conf())
        .args(QUICK)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].join("metrics.jsonl").is_file());
}

#[test]
fn unknown_config_key_is_named_and_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(&tmp.path().join("run"), 0, &["foo=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn every_bad_key_is_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "env = continuous-bandit\nbogus_one = 1\n").unwrap();
    let o = bin()
        .arg("train")
        .arg("--config")
        .arg(&conf)
        .args(["bogus_two=2", "gamma=abc"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for word in ["bogus_one", "bogus_two", "gamma"] {
        assert!(err.contains(word), "missing {word} in {err}");
    }
}

#[test]
fn unknown_environment_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(&tmp.path().join("run"), 0, &["env=cartpole"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cartpole"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&a, 7, &[]).status.success());
    assert!(train(&b, 7, &[]).status.success());
    let read = |d: &Path| fs::read(d.join(DirSink::METRICS)).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = tmp.path().join("c");
    assert!(train(&c, 8, &[]).status.success());
    assert_ne!(read(&a), read(&c));
}

fn eval_json(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with('{')).expect("json line");
    serde_json::from_str(line).unwrap()
}

/// Composite Simpson over twelve standard deviations either side.
fn expected_clipped_cost(mean: f64, std: f64) -> f64 {
    let n = 20_000;
    let (lo, hi) = (mean - 12.0 * std, mean + 12.0 * std);
    let h = (hi - lo) / n as f64;
    let f = |a: f64| {
        let z = (a - mean) / std;
        let density = (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt());
        let c = a.clamp(-1.0, 1.0);
        density * c * c
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

#[test]
fn untrained_bandit_policy_matches_quadrature() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(train(&run, 3, &[]).status.success());
    let initial = DirSink::checkpoint_path(&run, 0);
    let policy = TrainingCheckpoint::load(&initial).unwrap().agent.policy;
    let out = policy.forward(&[1.0]).unwrap();
    let (mean, std) = (out.mean_row(0)[0], out.std_row(0)[0]);
    let expected = -expected_clipped_cost(mean, std);

    let episodes = 20_000;
    let o = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&initial)
        .args(["--env", "continuous-bandit", "--episodes", &episodes.to_string(), "--stochastic", "--seed", "11"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let j = eval_json(&o);
    let got = j["return_mean"].as_f64().unwrap();
    let se = j["return_std"].as_f64().unwrap() / (episodes as f64).sqrt();
    assert!((got - expected).abs() <= 4.0 * se, "eval {got}, quadrature {expected}, se {se}");

    let again = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&initial)
        .args(["--env", "continuous-bandit", "--episodes", &episodes.to_string(), "--stochastic", "--seed", "11"])
        .output()
        .unwrap();
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn mean_action_eval_is_deterministic_and_matches_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(train(&run, 4, &[]).status.success());
    let ckpt = DirSink::checkpoint_path(&run, 140);
    let mean = TrainingCheckpoint::load(&ckpt).unwrap().agent.policy.mean_action(&[1.0]).unwrap()[0];
    let o = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--env", "continuous-bandit", "--episodes", "3"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let j = eval_json(&o);
    let c = mean.clamp(-1.0, 1.0);
    assert!((j["return_mean"].as_f64().unwrap() + c * c).abs() < 1e-12);
    let returns: Vec<f64> = j["returns"].as_array().unwrap().iter().map(|r| r.as_f64().unwrap()).collect();
    assert_eq!(returns.len(), 3);
    assert!(returns.iter().all(|&r| r == returns[0]));
}

#[test]
fn eval_rejects_zero_episodes_and_wrong_env() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(train(&run, 5, &[]).status.success());
    let ckpt = DirSink::checkpoint_path(&run, 0);
    let zero = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--env", "continuous-bandit", "--episodes", "0"])
        .output()
        .unwrap();
    assert_eq!(zero.status.code(), Some(2));
    let mismatch = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--env", "point-mass-2d", "--episodes", "1"])
        .output()
        .unwrap();
    assert!(!mismatch.status.success());
    assert!(stderr(&mismatch).contains("dim"), "{}", stderr(&mismatch));
}

#[test]
fn eval_of_missing_checkpoint_fails() {
    let o = bin()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt.json", "--env", "continuous-bandit", "--episodes", "1"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn verify_exit_codes() {
    let bad = bin().args(["verify", "nosuch"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("nosuch"));

    let ok = bin().args(["verify", "gradcheck"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn missing_subcommand_is_usage_error() {
    assert_eq!(bin().output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["train"]).output().unwrap().status.code(), Some(2));
}

fn plot(dirs: &[&Path], out: &Path) -> Output {
    bin().arg("plot").args(dirs).arg("--out").arg(out).output().unwrap()
}

fn read_curve(path: &Path) -> Vec<(usize, f64, usize)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap())
        })
        .collect()
}

fn evals_of(dir: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(dir.join(DirSink::METRICS))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "eval")
        .map(|v| (v["env_step"].as_u64().unwrap() as usize, v["eval_return_mean"].as_f64().unwrap()))
        .collect()
}

#[test]
fn plot_of_one_run_reproduces_its_evals() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(train(&run, 2, &[]).status.success());
    let out = tmp.path().join("curve");
    let o = plot(&[&run], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = read_curve(&out.with_extension("csv"));
    let evals = evals_of(&run);
    assert_eq!(curve.len(), evals.len());
    assert_eq!(curve.len(), eval_count(&run));
    for ((step, mean, runs), (s, m)) in curve.iter().zip(&evals) {
        assert_eq!((step, runs), (s, &1));
        assert_eq!(mean, m);
    }
    let svg = fs::read_to_string(out.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn plot_averages_runs_pointwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&a, 2, &[]).status.success());
    assert!(train(&b, 9, &[]).status.success());
    let out = tmp.path().join("curve");
    assert!(plot(&[&a, &b], &out).status.success());
    let curve = read_curve(&out.with_extension("csv"));
    let (ea, eb) = (evals_of(&a), evals_of(&b));
    assert_eq!(curve.len(), ea.len());
    for (((step, mean, runs), (sa, ma)), (sb, mb)) in curve.iter().zip(&ea).zip(&eb) {
        assert_eq!(step, sa);
        assert_eq!(step, sb);
        assert_eq!(*runs, 2);
        assert!((mean - (ma + mb) / 2.0).abs() <= 1e-12 * (1.0 + mean.abs()));
    }
}

#[test]
fn plot_rejects_mixed_environments() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&a, 2, &[]).status.success());
    let o = bin()
        .arg("train")
        .arg("--config")
        .arg(bandit_conf())
        .arg("--out")
        .arg(&b)
        .args(QUICK)
        .args(["env=point-mass-2d", "total_env_steps=120"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let p = plot(&[&a, &b], &tmp.path().join("curve"));
    assert!(!p.status.success());
    assert!(stderr(&p).contains("environments"));
}
