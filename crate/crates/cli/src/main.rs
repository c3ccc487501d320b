use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use softgrad::agent::{evaluate_policy, evaluate_policy_stochastic, run_training, DirSink, TrainingCheckpoint};
use softgrad::verify::{run_suite, SUITES};
use softgrad::{make_env, Agent, AgentConfig, Checkpoint, Error, GaussianPolicy};

mod plot;

#[derive(Parser)]
#[command(name = "softgrad", version, about = "Soft policy gradient training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, checkpoints and a manifest.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        env: Option<String>,
        /// Run directory; defaults to a fresh directory under $SOFTGRAD_OUT (or `runs`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` overrides applied after the config file.
        overrides: Vec<String>,
    },
    /// Roll out a checkpointed policy and report its mean return.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        episodes: usize,
        /// Sample actions instead of using the policy mean.
        #[arg(long)]
        stochastic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a named numerical check suite.
    Verify {
        /// gradcheck, backup, estimator, algebra, policy, tabular or all.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Average evaluation curves across run directories into CSV and SVG.
    Plot {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output path without extension.
        #[arg(long, default_value = "learning-curve")]
        out: PathBuf,
    },
}

/// Bad input from the caller; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A suite ran and at least one check failed; exits with status 1.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Configuration and precondition failures are the caller's to fix.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::Config(m) => usage(format!("configuration error: {m}")),
        Error::Precondition(m) => usage(m),
        other => anyhow::Error::new(other),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: AgentConfig,
    pub seed: u64,
    pub version: String,
    pub output_dir: PathBuf,
    pub config_file: PathBuf,
    pub overrides: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub final_checkpoint: Option<PathBuf>,
}

pub const MANIFEST: &str = "manifest.json";

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST), text + "\n").with_context(|| format!("writing manifest in {}", dir.display()))
}

fn load_config(path: &Path, seed: Option<u64>, env: Option<String>, overrides: &[String]) -> anyhow::Result<AgentConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = AgentConfig::default();
    let mut problems = Vec::new();
    if let Err(e) = config.apply_kv_text(&text) {
        problems.push(format!("{}: {}", path.display(), e));
    }
    if let Err(e) = config.apply_overrides(overrides) {
        problems.push(format!("overrides: {e}"));
    }
    if !problems.is_empty() {
        return Err(usage(problems.join("\n")));
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(env) = env {
        config.env = env;
    }
    config.validate().map_err(classify)?;
    Ok(config)
}

fn fresh_run_dir(config: &AgentConfig) -> PathBuf {
    let root = std::env::var_os("SOFTGRAD_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{}-seed{}-{stamp}", config.env, config.seed);
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{base}-{n}"));
    }
    dir
}

fn cmd_train(config_path: &Path, seed: Option<u64>, env: Option<String>, out: Option<PathBuf>, overrides: &[String]) -> anyhow::Result<()> {
    let config = load_config(config_path, seed, env, overrides)?;
    make_env(&config.env, config.seed).map_err(classify)?;
    let dir = out.unwrap_or_else(|| fresh_run_dir(&config));
    let mut sink = DirSink::create(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    let mut manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        output_dir: dir.clone(),
        config_file: config_path.to_path_buf(),
        overrides: overrides.to_vec(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
        final_checkpoint: None,
    };
    write_manifest(&dir, &manifest)?;
    let result = run_training(&config, &mut sink);
    manifest.finished_at = Some(now());
    match result {
        Ok(summary) => {
            manifest.status = "completed".into();
            manifest.final_checkpoint = Some(DirSink::checkpoint_path(&dir, summary.env_steps));
            write_manifest(&dir, &manifest)?;
            match summary.last_eval {
                Some(e) => println!(
                    "trained {} env steps ({} train steps); last eval {:.3} +- {:.3}; run directory {}",
                    summary.env_steps,
                    summary.train_steps,
                    e.eval_return_mean,
                    e.eval_return_std,
                    dir.display()
                ),
                None => println!("trained {} env steps; run directory {}", summary.env_steps, dir.display()),
            }
            Ok(())
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            write_manifest(&dir, &manifest)?;
            Err(anyhow::Error::new(e).context(format!("training aborted; partial run in {}", dir.display())))
        }
    }
}

/// Reads the policy out of any checkpoint kind that carries one.
fn load_policy(path: &Path) -> anyhow::Result<GaussianPolicy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if let Ok(c) = TrainingCheckpoint::from_checkpoint_str(&text) {
        return Ok(c.agent.policy);
    }
    if let Ok(a) = Agent::from_checkpoint_str(&text) {
        return Ok(a.policy);
    }
    GaussianPolicy::from_checkpoint_str(&text)
        .with_context(|| format!("{} is not a training, agent or policy checkpoint", path.display()))
}

fn cmd_eval(checkpoint: &Path, env_name: &str, episodes: usize, stochastic: bool, seed: u64) -> anyhow::Result<()> {
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let policy = load_policy(checkpoint)?;
    let mut env = make_env(env_name, seed).map_err(classify)?;
    let returns = if stochastic {
        evaluate_policy_stochastic(&policy, env.as_mut(), episodes, seed)?
    } else {
        evaluate_policy(&policy, env.as_mut(), episodes)?
    };
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mode = if stochastic { "stochastic" } else { "mean" };
    println!("{env_name}: {episodes} episodes ({mode} action): return {mean:.4} +- {std:.4}");
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint,
            "env": env_name,
            "episodes": episodes,
            "mode": mode,
            "return_mean": mean,
            "return_std": std,
            "returns": returns,
        })
    );
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64) -> anyhow::Result<()> {
    let checks = run_suite(suite, seed).map_err(|e| match e {
        Error::Config(m) => usage(m),
        other => anyhow::Error::new(other),
    })?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{suite}: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        return Err(anyhow::Error::new(ChecksFailed(failed)));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            env,
            out,
            overrides,
        } => cmd_train(&config, seed, env, out, &overrides),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            stochastic,
            seed,
        } => cmd_eval(&checkpoint, &env, episodes, stochastic, seed),
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
        Command::Plot { dirs, out } => plot::cmd_plot(&dirs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ChecksFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            if e.to_string().starts_with("unknown suite") {
                eprintln!("suites: {}, all", SUITES.join(", "));
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
