//! Exact reference computations on finite MDPs.
//!
//! Everything here is a direct linear-algebra evaluation: soft Q-values,
//! discounted state occupancy, the entropy-regularised objective and its
//! gradient with respect to softmax logits. The finite-difference and
//! Monte-Carlo routines exist to cross-check those closed forms.
//!
//! Occupancy is unnormalised: `rho(s) = sum_k gamma^k P(s_k = s)`, so it has
//! total mass `1 / (1 - gamma)`. The objective, exact gradient and sampling
//! estimator all use this one convention.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::ActionValue;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    states: usize,
    actions: usize,
    gamma: f64,
    start: Vec<f64>,
    /// `[s][a][s']`, flattened.
    transitions: Vec<f64>,
    /// `[s][a]`, flattened.
    rewards: Vec<f64>,
}

/// On-disk layout of an MDP fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFixture {
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub start: Vec<f64>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(
        states: usize,
        actions: usize,
        gamma: f64,
        start: Vec<f64>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if states == 0 || actions == 0 {
            return shape_err("MDP needs at least one state and one action");
        }
        if start.len() != states || transitions.len() != states * actions * states || rewards.len() != states * actions {
            return shape_err("MDP arrays do not match the declared state/action counts");
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
        }
        let is_distribution = |row: &[f64]| {
            row.iter().all(|&p| p >= 0.0 && p.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if !is_distribution(&start) {
            return Err(Error::Config("start distribution must be non-negative and sum to 1".into()));
        }
        for (k, row) in transitions.chunks_exact(states).enumerate() {
            if !is_distribution(row) {
                return Err(Error::Config(format!(
                    "transition row (s={}, a={}) is not a probability distribution",
                    k / actions,
                    k % actions
                )));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        Ok(Self {
            states,
            actions,
            gamma,
            start,
            transitions,
            rewards,
        })
    }

    /// Random MDP: Dirichlet(1) transition rows and start distribution,
    /// rewards uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(states: usize, actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut simplex = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let start = simplex(states);
        let mut transitions = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            transitions.extend(simplex(states));
        }
        let rewards = (0..states * actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(states, actions, gamma, start, transitions, rewards)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.states, self.actions, gamma, self.start.clone(), self.transitions.clone(), self.rewards.clone())
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.actions + a) * self.states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.actions + a) * self.states;
        &self.transitions[k..k + self.states]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.actions + a]
    }

    pub fn to_fixture(&self) -> MdpFixture {
        MdpFixture {
            states: self.states,
            actions: self.actions,
            gamma: self.gamma,
            start: self.start.clone(),
            transitions: (0..self.states)
                .map(|s| (0..self.actions).map(|a| self.transition_row(s, a).to_vec()).collect())
                .collect(),
            rewards: self.rewards.chunks_exact(self.actions).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_fixture(f: MdpFixture) -> Result<Self> {
        let transitions = f.transitions.into_iter().flatten().flatten().collect();
        let rewards = f.rewards.into_iter().flatten().collect();
        Self::new(f.states, f.actions, f.gamma, f.start, transitions, rewards)
    }

    pub fn from_fixture_str(text: &str) -> Result<Self> {
        Self::from_fixture(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_fixture_str(&fs::read_to_string(path)?)
    }

    fn require_discounted(&self) -> Result<()> {
        if self.gamma >= 1.0 {
            return Err(Error::Config(format!(
                "discount {} makes the evaluation system singular",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Tabular softmax policy over logits `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    states: usize,
    actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(states: usize, actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != states * actions {
            return shape_err("logit table has the wrong size");
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(Self { states, actions, logits })
    }

    pub fn uniform(states: usize, actions: usize) -> Self {
        Self {
            states,
            actions,
            logits: vec![0.0; states * actions],
        }
    }

    pub fn random<R: Rng + ?Sized>(states: usize, actions: usize, rng: &mut R) -> Self {
        let logits = (0..states * actions).map(|_| rng.random_range(-2.0..=2.0)).collect();
        Self { states, actions, logits }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        Self::new(self.states, self.actions, logits)
    }

    pub fn log_probs_row(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.actions..(s + 1) * self.actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row.iter().map(|l| l - lse).collect()
    }

    pub fn probs_row(&self, s: usize) -> Vec<f64> {
        let row = &self.logits[s * self.actions..(s + 1) * self.actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn entropy(&self, s: usize) -> f64 {
        self.probs_row(s)
            .iter()
            .zip(self.log_probs_row(s))
            .map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 })
            .sum()
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.states != mdp.states || self.actions != mdp.actions {
            return shape_err("policy and MDP disagree on state/action counts");
        }
        Ok(())
    }
}

/// A dense `[s][a]` value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub states: usize,
    pub actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.actions + a]
    }
}

impl ActionValue<usize, usize> for QTable {
    fn values(&self, pairs: &[(&usize, &usize)]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|(&s, &a)| {
                if s < self.states && a < self.actions {
                    Ok(self.get(s, a))
                } else {
                    shape_err(format!("({s}, {a}) outside the Q table"))
                }
            })
            .collect()
    }
}

fn solve(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let lu = matrix.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Config("evaluation system is singular".into()))?;
    // one step of iterative refinement
    let residual = &rhs - &matrix * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    Ok(x)
}

/// `P_pi(s, s') = sum_a pi(a|s) P(s, a, s')`.
pub fn policy_transition_matrix(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> DMatrix<f64> {
    let n = mdp.states;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        let pi = policy.probs_row(s);
        for (a, &pa) in pi.iter().enumerate() {
            for (t, &p) in mdp.transition_row(s, a).iter().enumerate() {
                m[(s, t)] += pa * p;
            }
        }
    }
    m
}

/// Solves `Q(s,a) = R(s,a) + gamma sum_s' P(s,a,s') [sum_a' pi(a'|s') Q(s',a') + tau H(s')]`
/// as one linear system over all state-action pairs.
pub fn exact_soft_q(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64) -> Result<QTable> {
    policy.check(mdp)?;
    mdp.require_discounted()?;
    let (ns, na) = (mdp.states, mdp.actions);
    let n = ns * na;
    let probs: Vec<Vec<f64>> = (0..ns).map(|s| policy.probs_row(s)).collect();
    let entropy: Vec<f64> = (0..ns).map(|s| policy.entropy(s)).collect();
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            let mut bonus = 0.0;
            for (t, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                bonus += p * entropy[t];
                for (b, &pb) in probs[t].iter().enumerate() {
                    a_mat[(row, t * na + b)] -= mdp.gamma * p * pb;
                }
            }
            rhs[row] = mdp.r(s, a) + mdp.gamma * tau * bonus;
        }
    }
    let q = solve(a_mat, rhs)?;
    Ok(QTable {
        states: ns,
        actions: na,
        values: q.iter().copied().collect(),
    })
}

/// Largest absolute violation of the soft Bellman equation by `q`.
pub fn soft_bellman_residual(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64, q: &QTable) -> f64 {
    let v = soft_state_values(policy, tau, q);
    let mut worst: f64 = 0.0;
    for s in 0..mdp.states {
        for a in 0..mdp.actions {
            let backed: f64 = mdp.r(s, a)
                + mdp.gamma
                    * mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(p, v)| p * v)
                        .sum::<f64>();
            worst = worst.max((q.get(s, a) - backed).abs());
        }
    }
    worst
}

/// `V(s) = sum_a pi(a|s) Q(s,a) + tau H(s)`.
pub fn soft_state_values(policy: &SoftmaxPolicy, tau: f64, q: &QTable) -> Vec<f64> {
    (0..policy.states)
        .map(|s| {
            policy
                .probs_row(s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * q.get(s, a))
                .sum::<f64>()
                + tau * policy.entropy(s)
        })
        .collect()
}

/// Exact soft backup of an arbitrary table:
/// `(TQ)(s,a) = R(s,a) + gamma E_{s'}[sum_a' pi(a'|s') (Q(s',a') - tau log pi(a'|s'))]`.
pub fn soft_backup_operator(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64, q: &QTable) -> QTable {
    let v = soft_state_values(policy, tau, q);
    let values = (0..mdp.states)
        .flat_map(|s| (0..mdp.actions).map(move |a| (s, a)))
        .map(|(s, a)| {
            mdp.r(s, a)
                + mdp.gamma
                    * mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(p, v)| p * v)
                        .sum::<f64>()
        })
        .collect();
    QTable {
        states: mdp.states,
        actions: mdp.actions,
        values,
    }
}

/// `rho = (I - gamma P_pi)^{-T} rho_0`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    mdp.require_discounted()?;
    let n = mdp.states;
    let p_pi = policy_transition_matrix(mdp, policy);
    let system = DMatrix::<f64>::identity(n, n) - p_pi.transpose() * mdp.gamma;
    let rho = solve(system, DVector::from_column_slice(&mdp.start))?;
    Ok(rho.iter().copied().collect())
}

/// Truncated power series `sum_{k<terms} gamma^k (rho_0^T P_pi^k)`.
pub fn occupancy_series(mdp: &TabularMdp, policy: &SoftmaxPolicy, terms: usize) -> Vec<f64> {
    let p_pi = policy_transition_matrix(mdp, policy);
    let mut dist = DVector::from_column_slice(&mdp.start);
    let mut acc = DVector::zeros(mdp.states);
    let mut weight = 1.0;
    for _ in 0..terms {
        acc += &dist * weight;
        dist = p_pi.transpose() * dist;
        weight *= mdp.gamma;
    }
    acc.iter().copied().collect()
}

/// `J = sum_s rho(s) [sum_a pi(a|s) R(s,a) + tau H(s)]`.
pub fn exact_objective(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64) -> Result<f64> {
    let rho = discounted_occupancy(mdp, policy)?;
    Ok((0..mdp.states)
        .map(|s| {
            let pi = policy.probs_row(s);
            let reward: f64 = pi.iter().enumerate().map(|(a, p)| p * mdp.r(s, a)).sum();
            rho[s] * (reward + tau * policy.entropy(s))
        })
        .sum())
}

/// The same objective written through the soft Q-function:
/// `J = E_{s_0}[sum_a pi(a|s_0) Q(s_0,a) + tau H(s_0)]`.
pub fn objective_from_q(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64) -> Result<f64> {
    let q = exact_soft_q(mdp, policy, tau)?;
    let v = soft_state_values(policy, tau, &q);
    Ok(mdp.start.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Whether the constant `-tau` appears in the per-action weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantTerm {
    Keep,
    Drop,
}

/// `sum_s rho(s) sum_a (Q(s,a) - tau log pi(a|s) - tau) d pi(a|s) / d theta`
/// over softmax logits.
pub fn exact_policy_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64) -> Result<Vec<f64>> {
    exact_policy_gradient_with(mdp, policy, tau, ConstantTerm::Keep)
}

pub fn exact_policy_gradient_with(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    tau: f64,
    constant: ConstantTerm,
) -> Result<Vec<f64>> {
    let q = exact_soft_q(mdp, policy, tau)?;
    let rho = discounted_occupancy(mdp, policy)?;
    let shift = match constant {
        ConstantTerm::Keep => tau,
        ConstantTerm::Drop => 0.0,
    };
    let na = mdp.actions;
    let mut grad = vec![0.0; mdp.states * na];
    for s in 0..mdp.states {
        let pi = policy.probs_row(s);
        let logp = policy.log_probs_row(s);
        let weight: Vec<f64> = (0..na).map(|a| q.get(s, a) - tau * logp[a] - shift).collect();
        let mean: f64 = pi.iter().zip(&weight).map(|(p, w)| p * w).sum();
        // d pi(a|s) / d theta(s,b) = pi(a|s) (1[a = b] - pi(b|s))
        for b in 0..na {
            grad[s * na + b] = rho[s] * pi[b] * (weight[b] - mean);
        }
    }
    Ok(grad)
}

/// Central differences of [`exact_objective`], one logit at a time.
pub fn finite_difference_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let base = policy.logits().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        out.push(central_difference(mdp, policy, tau, &base, i, h)?);
    }
    Ok(out)
}

/// Richardson-extrapolated central differences,
/// `(4 D(h/2) - D(h)) / 3`, accurate to `O(h^4)`.
pub fn extrapolated_difference_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let base = policy.logits().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let coarse = central_difference(mdp, policy, tau, &base, i, h)?;
        let fine = central_difference(mdp, policy, tau, &base, i, h / 2.0)?;
        out.push((4.0 * fine - coarse) / 3.0);
    }
    Ok(out)
}

fn central_difference(mdp: &TabularMdp, policy: &SoftmaxPolicy, tau: f64, base: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut x = base.to_vec();
    x[i] = base[i] + h;
    let up = exact_objective(mdp, &policy.with_logits(x.clone())?, tau)?;
    x[i] = base[i] - h;
    let down = exact_objective(mdp, &policy.with_logits(x)?, tau)?;
    Ok((up - down) / (2.0 * h))
}

/// A Monte-Carlo estimate with per-coordinate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Samples `(s, a)` from `rho(s) pi(a|s) / |rho|_1` and averages
/// `(Q - tau log pi - tau) grad log pi`, rescaled by `|rho|_1`.
pub fn mc_gradient_estimate<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    tau: f64,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let q = exact_soft_q(mdp, policy, tau)?;
    let rho = discounted_occupancy(mdp, policy)?;
    let mass: f64 = rho.iter().sum();
    let na = mdp.actions;
    let probs: Vec<Vec<f64>> = (0..mdp.states).map(|s| policy.probs_row(s)).collect();
    let logps: Vec<Vec<f64>> = (0..mdp.states).map(|s| policy.log_probs_row(s)).collect();
    let weights: Vec<f64> = (0..mdp.states)
        .flat_map(|s| probs[s].iter().map(|p| rho[s].max(0.0) * p).collect::<Vec<_>>())
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Numeric(format!("occupancy weights unusable: {e}")))?;

    let mut sum = vec![0.0; mdp.states * na];
    let mut sum_sq = vec![0.0; mdp.states * na];
    for _ in 0..samples {
        let k = dist.sample(rng);
        let (s, a) = (k / na, k % na);
        let w = (q.get(s, a) - tau * logps[s][a] - tau) * mass;
        for b in 0..na {
            let score = if a == b { 1.0 } else { 0.0 } - probs[s][b];
            let x = w * score;
            sum[s * na + b] += x;
            sum_sq[s * na + b] += x * x;
        }
    }
    let k = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            if samples < 2 {
                0.0
            } else {
                ((sq - k * m * m).max(0.0) / (k - 1.0) / k).sqrt()
            }
        })
        .collect();
    Ok(McEstimate { mean, std_err })
}

/// Ordinary (entropy-free) action values by repeated Bellman sweeps.
pub fn iterative_policy_evaluation(mdp: &TabularMdp, policy: &SoftmaxPolicy, tolerance: f64, max_sweeps: usize) -> Result<QTable> {
    policy.check(mdp)?;
    mdp.require_discounted()?;
    let (ns, na) = (mdp.states, mdp.actions);
    let probs: Vec<Vec<f64>> = (0..ns).map(|s| policy.probs_row(s)).collect();
    let mut q = vec![0.0; ns * na];
    for _ in 0..max_sweeps {
        let v: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| probs[s][a] * q[s * na + a]).sum())
            .collect();
        let mut change: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let next = mdp.r(s, a)
                    + mdp.gamma * mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                change = change.max((next - q[s * na + a]).abs());
                q[s * na + a] = next;
            }
        }
        if change < tolerance {
            return Ok(QTable {
                states: ns,
                actions: na,
                values: q,
            });
        }
    }
    Err(Error::Numeric("policy evaluation did not converge".into()))
}

/// Classical policy-gradient theorem for softmax logits, using occupancy from
/// the truncated series and action values from iterative evaluation.
pub fn classical_policy_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
    let q = iterative_policy_evaluation(mdp, policy, 1e-14, 100_000)?;
    let terms = ((1e-16f64).ln() / mdp.gamma.ln()).ceil().max(1.0) as usize + 10;
    let rho = occupancy_series(mdp, policy, terms);
    let na = mdp.actions;
    let mut grad = vec![0.0; mdp.states * na];
    for s in 0..mdp.states {
        let pi = policy.probs_row(s);
        for b in 0..na {
            // sum_a Q(s,a) pi(a|s) (1[a=b] - pi(b|s))
            let d: f64 = (0..na)
                .map(|a| q.get(s, a) * pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]))
                .sum();
            grad[s * na + b] = rho[s] * d;
        }
    }
    Ok(grad)
}
