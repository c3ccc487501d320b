//! The outer training loop, evaluation rollouts, and where their output goes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentConfig};
use crate::checkpoint::Checkpoint;
use crate::env::{make_env, Env};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::replay::{ReplayBuffer, Transition};

/// Added to the run seed for the evaluation environment's generator.
const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

const STREAM_INIT: u64 = 0;
const STREAM_ACT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub env_step: usize,
    /// Training episodes that finished since the previous record.
    pub episodes: usize,
    /// Mean unscaled return of those episodes.
    pub episode_return: Option<f64>,
    pub train_steps: usize,
    pub critic_loss: Option<f64>,
    pub grad_norm_pre: Option<f64>,
    pub grad_norm_post: Option<f64>,
    pub grad_norm_post_max: Option<f64>,
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env_step: usize,
    pub episodes: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Train(TrainRecord),
    Eval(EvalRecord),
}

/// Agent state at a given env step, plus the environment it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub env: String,
    pub env_step: usize,
    pub agent: Agent,
}

impl Checkpoint for TrainingCheckpoint {
    const KIND: &'static str = "training_checkpoint";

    fn validate(&self) -> Result<()> {
        Checkpoint::validate(&self.agent)
    }
}

/// Receives everything a run produces.
pub trait RunSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;

    fn checkpoint(&mut self, checkpoint: &TrainingCheckpoint) -> Result<()>;

    /// Wall-clock seconds since the run started, kept apart from the metrics
    /// so that those stay reproducible.
    fn timing(&mut self, _env_step: usize, _seconds: f64) -> Result<()> {
        Ok(())
    }

    fn transitions(&mut self, _buffer: &ReplayBuffer) -> Result<()> {
        Ok(())
    }
}

/// Keeps records and checkpoint steps in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
    pub checkpoint_steps: Vec<usize>,
}

impl MemorySink {
    pub fn evals(&self) -> Vec<&EvalRecord> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Eval(e) => Some(e),
                _ => None,
            })
            .collect()
    }

    pub fn trains(&self) -> Vec<&TrainRecord> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Train(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    /// The metrics stream exactly as [`DirSink`] would write it.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

impl RunSink for MemorySink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &TrainingCheckpoint) -> Result<()> {
        self.checkpoint_steps.push(checkpoint.env_step);
        Ok(())
    }
}

/// Writes `metrics.jsonl`, `timing.jsonl`, `checkpoints/` and optionally
/// `transitions.csv` under one directory.
pub struct DirSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl DirSink {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const TIMING: &'static str = "timing.jsonl";
    pub const CHECKPOINTS: &'static str = "checkpoints";
    pub const TRANSITIONS: &'static str = "transitions.csv";

    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(Self::CHECKPOINTS))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(Self::METRICS))?),
            timing: BufWriter::new(File::create(dir.join(Self::TIMING))?),
        })
    }

    pub fn checkpoint_path(dir: &Path, env_step: usize) -> PathBuf {
        dir.join(Self::CHECKPOINTS).join(format!("checkpoint-{env_step:08}.json"))
    }
}

impl RunSink for DirSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &TrainingCheckpoint) -> Result<()> {
        checkpoint.save(&Self::checkpoint_path(&self.dir, checkpoint.env_step))
    }

    fn timing(&mut self, env_step: usize, seconds: f64) -> Result<()> {
        writeln!(self.timing, "{}", serde_json::json!({ "env_step": env_step, "wall_clock": seconds }))?;
        self.timing.flush()?;
        Ok(())
    }

    fn transitions(&mut self, buffer: &ReplayBuffer) -> Result<()> {
        buffer.write_csv(File::create(self.dir.join(Self::TRANSITIONS))?)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub agent: Agent,
    pub env_steps: usize,
    pub train_steps: usize,
    pub episodes: usize,
    pub last_eval: Option<EvalRecord>,
}

/// Builds the configured environment (and a separately seeded copy for
/// evaluation) and trains on it.
pub fn run_training(config: &AgentConfig, sink: &mut dyn RunSink) -> Result<RunSummary> {
    let mut env = make_env(&config.env, config.seed)?;
    let mut eval_env = make_env(&config.env, config.seed.wrapping_add(EVAL_SEED_OFFSET))?;
    run_training_with(config, env.as_mut(), eval_env.as_mut(), sink)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Default)]
struct Window {
    episodes: usize,
    return_sum: f64,
    train_steps: usize,
    loss_sum: f64,
    pre_sum: f64,
    post_sum: f64,
    post_max: f64,
    entropy_sum: f64,
}

impl Window {
    fn record(&self, env_step: usize) -> TrainRecord {
        let k = self.train_steps as f64;
        let mean = |s: f64| (self.train_steps > 0).then(|| s / k);
        TrainRecord {
            env_step,
            episodes: self.episodes,
            episode_return: (self.episodes > 0).then(|| self.return_sum / self.episodes as f64),
            train_steps: self.train_steps,
            critic_loss: mean(self.loss_sum),
            grad_norm_pre: mean(self.pre_sum),
            grad_norm_post: mean(self.post_sum),
            grad_norm_post_max: (self.train_steps > 0).then_some(self.post_max),
            mean_entropy: mean(self.entropy_sum),
        }
    }
}

/// Acts with policy samples, stores reward-scaled transitions, and runs
/// `train_steps_per_env_step` updates per env step once the buffer holds
/// `max(batch_size, warmup)` transitions. Evaluation uses the mean action.
/// If the environment faults, the current agent is checkpointed before the
/// error is returned.
pub fn run_training_with(
    config: &AgentConfig,
    env: &mut dyn Env,
    eval_env: &mut dyn Env,
    sink: &mut dyn RunSink,
) -> Result<RunSummary> {
    config.validate()?;
    let spec = env.spec().clone();
    if eval_env.spec().state_dim != spec.state_dim || eval_env.spec().action_dim != spec.action_dim {
        return Err(Error::Shape("evaluation environment differs from the training environment".into()));
    }
    let started = Instant::now();
    let mut agent = Agent::new(config.clone(), spec.state_dim, spec.action_dim, &mut stream(config.seed, STREAM_INIT))?;
    let mut act_rng = stream(config.seed, STREAM_ACT);
    let mut train_rng = stream(config.seed, STREAM_TRAIN);
    let snapshot = |agent: &Agent, env_step| TrainingCheckpoint {
        env: spec.name.to_string(),
        env_step,
        agent: agent.clone(),
    };
    sink.checkpoint(&snapshot(&agent, 0))?;

    let mut buffer = ReplayBuffer::new(config.buffer_capacity, spec.state_dim, spec.action_dim)?;
    let learn_from = config.batch_size.max(config.warmup);
    let mut state = env.reset();
    let mut episode_return = 0.0;
    let mut window = Window::default();
    let mut summary_episodes = 0;
    let mut train_steps = 0;
    let mut last_eval = None;

    for step in 1..=config.total_env_steps {
        let action = agent.policy.sample(&state, 1, &mut act_rng)?.remove(0).action;
        let outcome = match env.step(&action) {
            Ok(o) => o,
            Err(e) => {
                sink.checkpoint(&snapshot(&agent, step - 1))?;
                return Err(e);
            }
        };
        buffer.push(Transition {
            state: std::mem::take(&mut state),
            action,
            reward: outcome.reward * config.reward_scale,
            next_state: outcome.next_state.clone(),
            terminal: outcome.terminal,
            truncated: outcome.truncated,
        })?;
        episode_return += outcome.reward;
        if outcome.terminal || outcome.truncated {
            window.episodes += 1;
            window.return_sum += episode_return;
            summary_episodes += 1;
            episode_return = 0.0;
            state = env.reset();
        } else {
            state = outcome.next_state;
        }

        if buffer.len() >= learn_from {
            for _ in 0..config.train_steps_per_env_step {
                let s = agent.train_step(&buffer, &mut train_rng)?;
                window.train_steps += 1;
                window.loss_sum += s.critic_loss;
                window.pre_sum += s.grad_norm_pre;
                window.post_sum += s.grad_norm_post;
                window.post_max = window.post_max.max(s.grad_norm_post);
                window.entropy_sum += s.mean_entropy;
                train_steps += 1;
            }
        }

        let last = step == config.total_env_steps;
        if step % config.log_interval == 0 || last {
            sink.record(&MetricRecord::Train(window.record(step)))?;
            sink.timing(step, started.elapsed().as_secs_f64())?;
            window = Window::default();
        }
        if (config.eval_interval > 0 && step % config.eval_interval == 0) || last {
            let returns = evaluate_policy(&agent.policy, eval_env, config.eval_episodes)?;
            let record = summarize(step, &returns);
            sink.record(&MetricRecord::Eval(record.clone()))?;
            last_eval = Some(record);
        }
        if (config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0) || last {
            sink.checkpoint(&snapshot(&agent, step))?;
        }
    }
    if config.export_transitions {
        sink.transitions(&buffer)?;
    }
    Ok(RunSummary {
        agent,
        env_steps: config.total_env_steps,
        train_steps,
        episodes: summary_episodes,
        last_eval,
    })
}

fn summarize(env_step: usize, returns: &[f64]) -> EvalRecord {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    EvalRecord {
        env_step,
        episodes: returns.len(),
        eval_return_mean: mean,
        eval_return_std: std,
    }
}

fn check_dims(policy: &GaussianPolicy, env: &dyn Env) -> Result<()> {
    let spec = env.spec();
    if policy.state_dim() != spec.state_dim || policy.action_dim() != spec.action_dim {
        return Err(Error::Shape(format!(
            "policy maps {} -> {} but {} has state dim {} and action dim {}",
            policy.state_dim(),
            policy.action_dim(),
            spec.name,
            spec.state_dim,
            spec.action_dim
        )));
    }
    Ok(())
}

/// Unscaled returns of full episodes played with the policy's mean action.
pub fn evaluate_policy(policy: &GaussianPolicy, env: &mut dyn Env, episodes: usize) -> Result<Vec<f64>> {
    check_dims(policy, env)?;
    rollouts(env, episodes, |s| policy.mean_action(s))
}

/// Like [`evaluate_policy`], but every action is sampled from the policy.
pub fn evaluate_policy_stochastic(policy: &GaussianPolicy, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    check_dims(policy, env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollouts(env, episodes, |s| Ok(policy.sample(s, 1, &mut rng)?.remove(0).action))
}

/// Returns of a policy that draws every action uniformly within the bounds.
pub fn random_policy_returns(env_name: &str, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut env = make_env(env_name, seed)?;
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollouts(env.as_mut(), episodes, |_| {
        Ok(spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(&lo, &hi)| rng.random_range(lo..=hi))
            .collect())
    })
}

fn rollouts(env: &mut dyn Env, episodes: usize, mut act: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::Precondition("need at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset();
        let mut total = 0.0;
        loop {
            let out = env.step(&act(&state)?)?;
            total += out.reward;
            if out.terminal || out.truncated {
                break;
            }
            state = out.next_state;
        }
        returns.push(total);
    }
    Ok(returns)
}
