//! The off-policy actor-critic learner: double-sampled soft policy gradient,
//! global-norm clipping, and interleaved critic/actor/target updates.

mod config;
mod run;

pub use config::{AgentConfig, CONFIG_KEYS};
pub use run::{
    evaluate_policy, evaluate_policy_stochastic, random_policy_returns, run_training, run_training_with, DirSink, EvalRecord, MemorySink,
    MetricRecord, RunSink, RunSummary, TrainRecord, TrainingCheckpoint,
};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::critic::{soft_target, ActionValue, SoftQ};
use crate::error::{shape_err, Error, Result};
use crate::nn::{clip_by_global_norm, AdamConfig, ClipOutcome, Direction};
use crate::policy::{gaussian_entropy, ActionSample, FlatSamples, GaussianPolicy, PolicyGradient, PolicyOutput};
use crate::replay::ReplayBuffer;
use crate::tabular::SoftmaxPolicy;

/// A policy that can draw actions with their log-densities and turn weighted
/// samples into `sum_ij w_ij grad log pi(a_ij | s_i)`.
pub trait StochasticActor {
    type State;
    type Action;
    type Gradient;

    fn sample_actions<R: Rng + ?Sized>(
        &self,
        states: &[&Self::State],
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<ActionSample<Self::Action>>>>;

    /// `weights[i * count + j]` multiplies the score of `actions[i][j]`.
    fn weighted_score(
        &self,
        states: &[&Self::State],
        actions: &[Vec<ActionSample<Self::Action>>],
        weights: &[f64],
    ) -> Result<Self::Gradient>;
}

impl StochasticActor for GaussianPolicy {
    type State = Vec<f64>;
    type Action = Vec<f64>;
    type Gradient = PolicyGradient;

    fn sample_actions<R: Rng + ?Sized>(
        &self,
        states: &[&Vec<f64>],
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<ActionSample>>> {
        let flat = stack(states, self.state_dim())?;
        Ok(self.sample_batch(&flat, states.len(), count, rng)?.1)
    }

    fn weighted_score(
        &self,
        states: &[&Vec<f64>],
        actions: &[Vec<ActionSample>],
        weights: &[f64],
    ) -> Result<PolicyGradient> {
        if actions.len() != states.len() {
            return shape_err("states and actions differ in length");
        }
        let count = actions.first().map_or(0, Vec::len);
        if actions.iter().any(|row| row.len() != count) {
            return shape_err("every state needs the same number of sampled actions");
        }
        let d = self.action_dim();
        let mut flat = Vec::with_capacity(states.len() * count * d);
        for sample in actions.iter().flatten() {
            if sample.action.len() != d {
                return shape_err(format!("action of length {}, expected {d}", sample.action.len()));
            }
            flat.extend_from_slice(&sample.action);
        }
        let samples = FlatSamples {
            rows: states.len(),
            count,
            action_dim: d,
            actions: flat,
            log_probs: actions.iter().flatten().map(|a| a.log_prob).collect(),
        };
        let out = self.forward_batch(&stack(states, self.state_dim())?, states.len())?;
        self.weighted_score_flat(&out, &samples, weights)
    }
}

impl StochasticActor for SoftmaxPolicy {
    type State = usize;
    type Action = usize;
    type Gradient = Vec<f64>;

    fn sample_actions<R: Rng + ?Sized>(
        &self,
        states: &[&usize],
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<ActionSample<usize>>>> {
        states
            .iter()
            .map(|&&s| {
                if s >= self.states() {
                    return shape_err(format!("state {s} out of range"));
                }
                let probs = self.probs_row(s);
                let logp = self.log_probs_row(s);
                let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(e.to_string()))?;
                Ok((0..count)
                    .map(|_| {
                        let a = dist.sample(rng);
                        ActionSample {
                            action: a,
                            log_prob: logp[a],
                        }
                    })
                    .collect())
            })
            .collect()
    }

    /// Over logits: `d log pi(a|s) / d theta(s, b) = 1[a = b] - pi(b|s)`.
    fn weighted_score(
        &self,
        states: &[&usize],
        actions: &[Vec<ActionSample<usize>>],
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let na = self.actions();
        let mut grad = vec![0.0; self.states() * na];
        let mut w = weights.iter();
        for (&&s, row) in states.iter().zip(actions) {
            let probs = self.probs_row(s);
            for sample in row {
                let wij = *w.next().ok_or_else(|| Error::Shape("fewer weights than samples".into()))?;
                for b in 0..na {
                    let indicator = if b == sample.action { 1.0 } else { 0.0 };
                    grad[s * na + b] += wij * (indicator - probs[b]);
                }
            }
        }
        Ok(grad)
    }
}

fn stack(states: &[&Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(states.len() * dim);
    for (i, s) in states.iter().enumerate() {
        if s.len() != dim {
            return shape_err(format!("state {i} has {} entries, expected {dim}", s.len()));
        }
        flat.extend_from_slice(s);
    }
    Ok(flat)
}

/// `(1 / NM) sum_i sum_j (Q(s_i, a_ij) - tau log pi(a_ij|s_i) - tau) grad log pi(a_ij|s_i)`
/// with `a_ij` drawn fresh from `policy` and `Q` the online critic.
pub fn actor_gradient<P, Q, R>(
    policy: &P,
    critic: &Q,
    states: &[&P::State],
    samples: usize,
    tau: f64,
    rng: &mut R,
) -> Result<P::Gradient>
where
    P: StochasticActor,
    Q: ActionValue<P::State, P::Action> + ?Sized,
    R: Rng + ?Sized,
{
    if states.is_empty() || samples == 0 {
        return Err(Error::Precondition("actor gradient needs at least one state and one sample".into()));
    }
    let actions = policy.sample_actions(states, samples, rng)?;
    let pairs: Vec<(&P::State, &P::Action)> = states
        .iter()
        .zip(&actions)
        .flat_map(|(&s, row)| row.iter().map(move |x| (s, &x.action)))
        .collect();
    let q = critic.values(&pairs)?;
    let log_probs: Vec<f64> = actions.iter().flatten().map(|a| a.log_prob).collect();
    let weights = actor_weights(&q, &log_probs, samples, tau)?;
    policy.weighted_score(states, &actions, &weights)
}

/// `(Q_ij - tau log pi_ij - tau) / (N M)` for row-major `N x M` inputs.
pub fn actor_weights(q: &[f64], log_probs: &[f64], samples: usize, tau: f64) -> Result<Vec<f64>> {
    if q.len() != log_probs.len() || samples == 0 || q.len() % samples != 0 {
        return shape_err("Q values and log-probs must form the same N x M grid");
    }
    let norm = q.len() as f64;
    q.iter()
        .zip(log_probs)
        .enumerate()
        .map(|(k, (&qv, &lp))| {
            if qv.is_finite() && lp.is_finite() {
                Ok((qv - tau * lp - tau) / norm)
            } else {
                Err(Error::Numeric(format!(
                    "non-finite Q ({qv}) or log-prob ({lp}) at state {}, sample {}",
                    k / samples,
                    k % samples
                )))
            }
        })
        .collect()
}

/// The same estimator as [`actor_gradient`] for a Gaussian policy and a
/// network critic, on contiguous buffers. Consumes the generator exactly as
/// the generic route does and returns the policy output it sampled from.
pub fn gaussian_actor_gradient<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    critic: &SoftQ,
    states: &[f64],
    rows: usize,
    samples: usize,
    tau: f64,
    rng: &mut R,
) -> Result<(PolicyGradient, PolicyOutput)> {
    if rows == 0 || samples == 0 {
        return Err(Error::Precondition("actor gradient needs at least one state and one sample".into()));
    }
    let (out, drawn) = policy.sample_flat(states, rows, samples, rng)?;
    let q = critic.values_flat(false, states, &drawn)?;
    let weights = actor_weights(&q, &drawn.log_probs, samples, tau)?;
    let grad = policy.weighted_score_flat(&out, &drawn, &weights)?;
    Ok((grad, out))
}

/// Clips by global norm, then takes an ascent Adam step.
pub fn clipped_actor_update(
    policy: &mut GaussianPolicy,
    mut gradient: PolicyGradient,
    clip_norm: f64,
    adam: &AdamConfig,
) -> Result<ClipOutcome> {
    let outcome = clip_by_global_norm(&mut gradient.parts_mut(), clip_norm)?;
    policy.adam_step(&gradient, adam, Direction::Ascend)?;
    Ok(outcome)
}

/// Diagnostics from one train step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub mean_entropy: f64,
}

/// Online and target actor, critic (with its own target), and settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy: GaussianPolicy,
    pub target_policy: GaussianPolicy,
    pub critic: SoftQ,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let policy = GaussianPolicy::new(state_dim, action_dim, &config.hidden_sizes, config.std_floor, rng)?;
        let critic = SoftQ::new(state_dim, action_dim, &config.hidden_sizes, rng)?;
        Ok(Self {
            target_policy: policy.clone(),
            policy,
            critic,
            config,
        })
    }

    pub fn from_parts(config: AgentConfig, policy: GaussianPolicy, critic: SoftQ) -> Result<Self> {
        config.validate()?;
        let agent = Self {
            target_policy: policy.clone(),
            policy,
            critic,
            config,
        };
        agent.validate()?;
        Ok(agent)
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (p, t, c) = (&self.policy, &self.target_policy, &self.critic);
        if p.state_dim() != c.state_dim() || p.action_dim() != c.action_dim() {
            return shape_err("policy and critic disagree on dimensions");
        }
        if p.flatten().len() != t.flatten().len() {
            return shape_err("target policy differs in shape from the policy");
        }
        Ok(())
    }

    /// Minibatch, target-policy next actions, backup targets, critic descent,
    /// current-policy actions, clipped actor ascent, then Polyak on both targets.
    /// The reported entropy is that of the policy the actor samples came from.
    pub fn train_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<StepStats> {
        let cfg = &self.config;
        let (n, m) = (cfg.batch_size, cfg.action_samples);
        let batch = buffer.sample_minibatch(n, rng)?;
        let sd = self.policy.state_dim();

        let next_refs: Vec<&Vec<f64>> = batch.iter().map(|t| &t.next_state).collect();
        let next_flat = stack(&next_refs, sd)?;
        let (next_out, next) = self.target_policy.sample_flat(&next_flat, n, m, rng)?;
        let next_q = self.critic.values_flat(true, &next_flat, &next)?;
        if let Some(k) = next.log_probs.iter().position(|lp| !lp.is_finite()) {
            return Err(Error::Numeric(format!("non-finite log-prob for transition {}, action {}", k / m, k % m)));
        }
        let targets: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let entropy = cfg.analytic_entropy_backup.then(|| gaussian_entropy(next_out.std_row(i)));
                let span = i * m..(i + 1) * m;
                soft_target(t.reward, t.terminal, cfg.gamma, cfg.tau, &next_q[span.clone()], &next.log_probs[span], entropy)
            })
            .collect();

        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
        let actions: Vec<Vec<f64>> = batch.iter().map(|t| t.action.clone()).collect();
        let (critic_loss, critic_grad) = self.critic.soft_loss(&states, &actions, &targets)?;
        self.critic.critic_update(&critic_grad, &AdamConfig::with_lr(cfg.critic_lr))?;

        let state_flat = stack(&states.iter().collect::<Vec<_>>(), sd)?;
        let (grad, out) = gaussian_actor_gradient(&self.policy, &self.critic, &state_flat, n, m, cfg.tau, rng)?;
        let clip = clipped_actor_update(&mut self.policy, grad, cfg.clip_norm, &AdamConfig::with_lr(cfg.actor_lr))?;

        let alpha = cfg.polyak_alpha;
        self.target_policy.polyak_toward(&self.policy, alpha)?;
        self.critic.polyak_target(alpha)?;

        let mean_entropy = (0..n).map(|i| gaussian_entropy(out.std_row(i))).sum::<f64>() / n as f64;
        Ok(StepStats {
            critic_loss,
            grad_norm_pre: clip.norm_before,
            grad_norm_post: clip.norm_after,
            mean_entropy,
        })
    }
}

impl Checkpoint for Agent {
    const KIND: &'static str = "agent";

    fn validate(&self) -> Result<()> {
        Agent::validate(self)
    }
}
