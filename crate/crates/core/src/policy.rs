//! State-conditioned diagonal Gaussian actor.
//!
//! A ReLU trunk feeds two single-layer heads: an identity head for the mean
//! and a sigmoid head for the standard deviation, which is floored at
//! `std_floor`. Actions are never squashed; densities always refer to the
//! unbounded Gaussian.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{global_norm, polyak_update, Activation, AdamConfig, Dense, Direction, Gradient, Mlp, Tape};

pub const DEFAULT_STD_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// One drawn action together with its log-density under the policy that drew it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample<A = Vec<f64>> {
    pub action: A,
    pub log_prob: f64,
}

/// `sum_d [-0.5 ln(2 pi) - ln sigma_d - 0.5 ((a_d - mu_d) / sigma_d)^2]`
pub fn gaussian_log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    log_prob_given_normalizer(gaussian_log_normalizer(std), mean, std, action)
}

/// Log-density at the mean: `-sum_d [0.5 ln(2 pi) + ln sigma_d]`.
pub fn gaussian_log_normalizer(std: &[f64]) -> f64 {
    -std.iter().map(|s| HALF_LN_2PI + s.ln()).sum::<f64>()
}

fn log_prob_given_normalizer(normalizer: f64, mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    let sq: f64 = mean
        .iter()
        .zip(std)
        .zip(action)
        .map(|((&m, &s), &a)| {
            let z = (a - m) / s;
            z * z
        })
        .sum();
    normalizer - 0.5 * sq
}

/// Closed-form entropy of a diagonal Gaussian, in nats.
pub fn gaussian_entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + s.ln()).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPolicy {
    action_dim: usize,
    std_floor: f64,
    trunk: Mlp,
    mean_head: Mlp,
    std_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct PolicyTape {
    trunk: Tape,
    mean: Tape,
    std: Tape,
    /// Sigmoid output before the floor is applied.
    raw_std: Vec<f64>,
}

/// Means and standard deviations for a batch of states, row-major.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub rows: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub tape: PolicyTape,
}

impl PolicyOutput {
    pub fn mean_row(&self, i: usize) -> &[f64] {
        let d = self.mean.len() / self.rows;
        &self.mean[i * d..(i + 1) * d]
    }

    pub fn std_row(&self, i: usize) -> &[f64] {
        let d = self.std.len() / self.rows;
        &self.std[i * d..(i + 1) * d]
    }
}

/// `count` actions per state stored contiguously: sample `j` of state `i`
/// is row `i * count + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSamples {
    pub rows: usize,
    pub count: usize,
    pub action_dim: usize,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl FlatSamples {
    pub fn action(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.count + j) * self.action_dim;
        &self.actions[k..k + self.action_dim]
    }

    pub fn into_nested(self) -> Vec<Vec<ActionSample>> {
        let d = self.action_dim;
        let mut lp = self.log_probs.into_iter();
        let mut chunks = self.actions.chunks_exact(d.max(1));
        (0..self.rows)
            .map(|_| {
                (0..self.count)
                    .map(|_| ActionSample {
                        action: if d == 0 { Vec::new() } else { chunks.next().unwrap().to_vec() },
                        log_prob: lp.next().unwrap(),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Gradient over all actor parameters: trunk plus both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub trunk: Gradient,
    pub mean_head: Gradient,
    pub std_head: Gradient,
}

impl PolicyGradient {
    pub fn parts(&self) -> [&Gradient; 3] {
        [&self.trunk, &self.mean_head, &self.std_head]
    }

    pub fn parts_mut(&mut self) -> [&mut Gradient; 3] {
        [&mut self.trunk, &mut self.mean_head, &mut self.std_head]
    }

    pub fn global_norm(&self) -> f64 {
        global_norm(&self.parts())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|g| g.flatten()).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.parts_mut() {
            g.scale(factor);
        }
    }

    pub fn add_assign(&mut self, other: &PolicyGradient) -> Result<()> {
        self.trunk.add_assign(&other.trunk)?;
        self.mean_head.add_assign(&other.mean_head)?;
        self.std_head.add_assign(&other.std_head)
    }
}

impl GaussianPolicy {
    /// ReLU trunk with the given hidden widths, then the two heads.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        std_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("policy needs at least one hidden layer".into()));
        }
        let spec: Vec<_> = hidden.iter().map(|&h| (h, Activation::Relu)).collect();
        let trunk = Mlp::new(state_dim, &spec, rng)?;
        let width = *hidden.last().unwrap();
        let mean_head = Mlp::new(width, &[(action_dim, Activation::Identity)], rng)?;
        let std_head = Mlp::new(width, &[(action_dim, Activation::Sigmoid)], rng)?;
        Self::from_parts(trunk, mean_head, std_head, std_floor)
    }

    pub fn from_parts(trunk: Mlp, mean_head: Mlp, std_head: Mlp, std_floor: f64) -> Result<Self> {
        let p = Self {
            action_dim: mean_head.output_dim(),
            std_floor,
            trunk,
            mean_head,
            std_head,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.mean_head.validate()?;
        self.std_head.validate()?;
        if !(self.std_floor > 0.0 && self.std_floor < 1.0) {
            return Err(Error::Config(format!(
                "std floor must lie in (0, 1), got {}",
                self.std_floor
            )));
        }
        let width = self.trunk.output_dim();
        let head_ok = |h: &Mlp, act: Activation| {
            h.layers().len() == 1
                && h.input_dim() == width
                && h.output_dim() == self.action_dim
                && h.layers()[0].activation == act
        };
        if !head_ok(&self.mean_head, Activation::Identity) || !head_ok(&self.std_head, Activation::Sigmoid) {
            return shape_err("policy heads must be single identity/sigmoid layers fed by the trunk");
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn std_floor(&self) -> f64 {
        self.std_floor
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn mean_head(&self) -> &Mlp {
        &self.mean_head
    }

    pub fn std_head(&self) -> &Mlp {
        &self.std_head
    }

    /// Mutable access to the three parameter sets (trunk, mean head, std head).
    pub fn networks_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.trunk, &mut self.mean_head, &mut self.std_head]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.flatten();
        v.extend(self.mean_head.flatten());
        v.extend(self.std_head.flatten());
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let a = self.trunk.param_count();
        let b = self.mean_head.param_count();
        let c = self.std_head.param_count();
        if flat.len() != a + b + c {
            return shape_err(format!("expected {} policy parameters, got {}", a + b + c, flat.len()));
        }
        self.trunk.unflatten(&flat[..a])?;
        self.mean_head.unflatten(&flat[a..a + b])?;
        self.std_head.unflatten(&flat[a + b..])
    }

    pub fn zero_gradient(&self) -> PolicyGradient {
        PolicyGradient {
            trunk: Gradient::zeros_like(&self.trunk),
            mean_head: Gradient::zeros_like(&self.mean_head),
            std_head: Gradient::zeros_like(&self.std_head),
        }
    }

    pub fn forward(&self, state: &[f64]) -> Result<PolicyOutput> {
        self.forward_batch(state, 1)
    }

    /// Batched forward pass; `std = max(sigmoid(head), std_floor)`.
    pub fn forward_batch(&self, states: &[f64], rows: usize) -> Result<PolicyOutput> {
        let (hidden, trunk_tape) = self.trunk.forward_batch(states, rows)?;
        let (mean, mean_tape) = self.mean_head.forward_batch(&hidden, rows)?;
        let (raw_std, std_tape) = self.std_head.forward_batch(&hidden, rows)?;
        let std = raw_std.iter().map(|&s| s.max(self.std_floor)).collect();
        Ok(PolicyOutput {
            rows,
            mean,
            std,
            tape: PolicyTape {
                trunk: trunk_tape,
                mean: mean_tape,
                std: std_tape,
                raw_std,
            },
        })
    }

    /// Mean actions without keeping a tape; used for evaluation rollouts.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let hidden = self.trunk.predict_batch(state, 1)?;
        self.mean_head.predict_batch(&hidden, 1)
    }

    /// Gradient through the network given cotangents on the (floored) mean and
    /// std outputs. Entries where the floor is active receive no gradient.
    pub fn backward(&self, tape: &PolicyTape, d_mean: &[f64], d_std: &[f64]) -> Result<PolicyGradient> {
        if d_std.len() != tape.raw_std.len() {
            return shape_err("std cotangent length does not match tape");
        }
        let d_raw: Vec<f64> = d_std
            .iter()
            .zip(&tape.raw_std)
            .map(|(&d, &raw)| if raw >= self.std_floor { d } else { 0.0 })
            .collect();
        let (g_mean, mut d_hidden) = self.mean_head.backward(&tape.mean, d_mean)?;
        let (g_std, d_hidden_std) = self.std_head.backward(&tape.std, &d_raw)?;
        for (a, b) in d_hidden.iter_mut().zip(d_hidden_std) {
            *a += b;
        }
        let (g_trunk, _) = self.trunk.backward(&tape.trunk, &d_hidden)?;
        Ok(PolicyGradient {
            trunk: g_trunk,
            mean_head: g_mean,
            std_head: g_std,
        })
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<ActionSample>> {
        Ok(self.sample_batch(state, 1, count, rng)?.1.remove(0))
    }

    /// `count` draws for each of `rows` states, drawn row by row.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        states: &[f64],
        rows: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<(PolicyOutput, Vec<Vec<ActionSample>>)> {
        let (out, flat) = self.sample_flat(states, rows, count, rng)?;
        Ok((out, flat.into_nested()))
    }

    /// Same draws as [`Self::sample_batch`], stored contiguously.
    pub fn sample_flat<R: Rng + ?Sized>(
        &self,
        states: &[f64],
        rows: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<(PolicyOutput, FlatSamples)> {
        let out = self.forward_batch(states, rows)?;
        let d = self.action_dim;
        let mut actions = Vec::with_capacity(rows * count * d);
        let mut log_probs = Vec::with_capacity(rows * count);
        for i in 0..rows {
            let (mean, std) = (out.mean_row(i), out.std_row(i));
            let normalizer = gaussian_log_normalizer(std);
            for _ in 0..count {
                let mut sq = 0.0;
                for (&m, &s) in mean.iter().zip(std) {
                    let z: f64 = rng.sample(StandardNormal);
                    actions.push(m + s * z);
                    sq += z * z;
                }
                // the standardised draw is already at hand; recovering it
                // from the action would only add rounding
                log_probs.push(normalizer - 0.5 * sq);
            }
        }
        Ok((
            out,
            FlatSamples {
                rows,
                count,
                action_dim: d,
                actions,
                log_probs,
            },
        ))
    }

    /// `sum_ij w_ij grad log pi(a_ij | s_i)` for samples drawn from `out`,
    /// with one backward pass through the recorded tape.
    pub fn weighted_score_flat(&self, out: &PolicyOutput, samples: &FlatSamples, weights: &[f64]) -> Result<PolicyGradient> {
        let (rows, count, d) = (samples.rows, samples.count, self.action_dim);
        if out.rows != rows || samples.action_dim != d || weights.len() != rows * count || samples.actions.len() != rows * count * d {
            return shape_err("samples, weights and policy output disagree in shape");
        }
        let mut d_mean = vec![0.0; rows * d];
        let mut d_std = vec![0.0; rows * d];
        for i in 0..rows {
            let (dm, ds) = (&mut d_mean[i * d..(i + 1) * d], &mut d_std[i * d..(i + 1) * d]);
            for j in 0..count {
                let w = weights[i * count + j];
                accumulate_log_prob_partials(out.mean_row(i), out.std_row(i), samples.action(i, j), w, dm, ds);
            }
        }
        self.backward(&out.tape, &d_mean, &d_std)
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.check_action(action)?;
        let out = self.forward(state)?;
        Ok(gaussian_log_prob(&out.mean, &out.std, action))
    }

    pub fn entropy(&self, state: &[f64]) -> Result<f64> {
        let out = self.forward(state)?;
        Ok(gaussian_entropy(&out.std))
    }

    /// Exact gradient of `log_prob(state, action)` with respect to every
    /// policy parameter.
    pub fn score_grad(&self, state: &[f64], action: &[f64]) -> Result<PolicyGradient> {
        self.check_action(action)?;
        let out = self.forward(state)?;
        let mut d_mean = vec![0.0; self.action_dim];
        let mut d_std = vec![0.0; self.action_dim];
        accumulate_log_prob_partials(&out.mean, &out.std, action, 1.0, &mut d_mean, &mut d_std);
        self.backward(&out.tape, &d_mean, &d_std)
    }

    pub fn adam_step(&mut self, grad: &PolicyGradient, config: &AdamConfig, direction: Direction) -> Result<()> {
        for g in grad.parts() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite policy gradient".into()));
            }
        }
        self.trunk.adam_step(&grad.trunk, config, direction)?;
        self.mean_head.adam_step(&grad.mean_head, config, direction)?;
        self.std_head.adam_step(&grad.std_head, config, direction)
    }

    /// `self <- alpha * online + (1 - alpha) * self` on every parameter.
    pub fn polyak_toward(&mut self, online: &GaussianPolicy, alpha: f64) -> Result<()> {
        polyak_update(&mut self.trunk, &online.trunk, alpha)?;
        polyak_update(&mut self.mean_head, &online.mean_head, alpha)?;
        polyak_update(&mut self.std_head, &online.std_head, alpha)
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.action_dim {
            return shape_err(format!(
                "action has {} entries, policy emits {}",
                action.len(),
                self.action_dim
            ));
        }
        Ok(())
    }
}

/// Adds `weight * d log N(a; mu, sigma) / d(mu, sigma)` into the given buffers.
pub(crate) fn accumulate_log_prob_partials(
    mean: &[f64],
    std: &[f64],
    action: &[f64],
    weight: f64,
    d_mean: &mut [f64],
    d_std: &mut [f64],
) {
    for d in 0..mean.len() {
        let s = std[d];
        let diff = action[d] - mean[d];
        let z = diff / s;
        d_mean[d] += weight * z / s;
        d_std[d] += weight * (z * z - 1.0) / s;
    }
}

impl Checkpoint for GaussianPolicy {
    const KIND: &'static str = "gaussian_policy";

    fn validate(&self) -> Result<()> {
        GaussianPolicy::validate(self)
    }
}

/// A policy whose every weight is zero and whose head biases are given.
pub fn constant_policy(state_dim: usize, hidden: usize, mean_bias: &[f64], std_logit: &[f64], std_floor: f64) -> Result<GaussianPolicy> {
    let a = mean_bias.len();
    let trunk = Mlp::from_layers(vec![Dense::zeros(state_dim, hidden, Activation::Relu)])?;
    let mean = Mlp::from_layers(vec![Dense::from_parts(hidden, a, Activation::Identity, vec![0.0; hidden * a], mean_bias.to_vec())?])?;
    let std = Mlp::from_layers(vec![Dense::from_parts(hidden, a, Activation::Sigmoid, vec![0.0; hidden * a], std_logit.to_vec())?])?;
    GaussianPolicy::from_parts(trunk, mean, std, std_floor)
}
