//! Named numerical self-checks, each reporting what it measured against the
//! tolerance it was held to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{actor_gradient, run_training, Agent, AgentConfig, MemorySink};
use crate::critic::{sampled_backup, ActionValue, BackupBatch, SoftQ};
use crate::error::{Error, Result};
use crate::nn::{clip_by_global_norm, polyak_update, Activation, AdamConfig, Direction, Gradient, Mlp};
use crate::policy::{gaussian_entropy, ActionSample, GaussianPolicy};
use crate::replay::{ReplayBuffer, Transition};
use crate::tabular::{
    classical_policy_gradient, discounted_occupancy, exact_objective, exact_policy_gradient,
    exact_policy_gradient_with, exact_soft_q, extrapolated_difference_gradient, iterative_policy_evaluation,
    mc_gradient_estimate, objective_from_q, occupancy_series, soft_backup_operator, soft_bellman_residual,
    ConstantTerm, QTable, SoftmaxPolicy, TabularMdp,
};

pub const SUITES: [&str; 6] = ["gradcheck", "backup", "estimator", "algebra", "policy", "tabular"];

/// Outcome of one check: `measured <= tolerance` means it passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Extra statistics worth printing alongside the measurement.
    pub detail: Option<String>,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail: None,
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}/{}: measured {:.3e}, tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )?;
        match &self.detail {
            Some(d) => write!(f, " ({d})"),
            None => Ok(()),
        }
    }
}

/// Runs one suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<Check>> {
    match name {
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        "gradcheck" => gradcheck(seed),
        "backup" => backup(seed),
        "estimator" => estimator(seed),
        "algebra" => algebra(seed),
        "policy" => policy_checks(seed),
        "tabular" => tabular_checks(seed),
        other => Err(Error::Config(format!(
            "unknown suite `{other}`; expected one of {} or all",
            SUITES.join(", ")
        ))),
    }
}

/// Worst per-coordinate violation ratio `|a - b| / (rel * |b| + abs)`.
fn violation(a: &[f64], b: &[f64], rel: f64, abs: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (rel * y.abs() + abs))
        .fold(0.0, f64::max)
}

fn norm_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_mlp<R: Rng>(rng: &mut R) -> Result<(Mlp, usize)> {
    let input = rng.random_range(1..=6);
    let h1 = rng.random_range(2..=64);
    let h2 = rng.random_range(2..=64);
    let out = rng.random_range(1..=3);
    let net = Mlp::new(input, &[(h1, Activation::Relu), (h2, Activation::Relu), (out, Activation::Identity)], rng)?;
    Ok((net, input))
}

/// Norm-wise relative error between backpropagated and central-difference
/// gradients of `sum_k c_k f_k(x)` over the network parameters.
pub fn network_gradcheck(net: &Mlp, input: &[f64], cotangent: &[f64], h: f64) -> Result<f64> {
    let (_, tape) = net.forward(input)?;
    let (grad, _) = net.backward(&tape, cotangent)?;
    let base = net.flatten();
    let mut probe = net.clone();
    let objective = |n: &Mlp| -> Result<f64> {
        let (y, _) = n.forward(input)?;
        Ok(y.iter().zip(cotangent).map(|(a, b)| a * b).sum())
    };
    let mut fd = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + h;
        probe.unflatten(&x)?;
        let up = objective(&probe)?;
        x[i] = base[i] - h;
        probe.unflatten(&x)?;
        let down = objective(&probe)?;
        x[i] = base[i];
        fd.push((up - down) / (2.0 * h));
    }
    Ok(norm_rel_error(&grad.flatten(), &fd))
}

/// Same comparison for `grad_theta log pi(a|s)`.
pub fn score_gradcheck(policy: &GaussianPolicy, state: &[f64], action: &[f64], h: f64) -> Result<f64> {
    let exact = policy.score_grad(state, action)?.flatten();
    let base = policy.flatten();
    let mut probe = policy.clone();
    let mut x = base.clone();
    let mut fd = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        x[i] = base[i] + h;
        probe.unflatten(&x)?;
        let up = probe.log_prob(state, action)?;
        x[i] = base[i] - h;
        probe.unflatten(&x)?;
        let down = probe.log_prob(state, action)?;
        x[i] = base[i];
        fd.push((up - down) / (2.0 * h));
    }
    Ok(norm_rel_error(&exact, &fd))
}

fn gradcheck(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let s = rng.random_range(1..=20);
        let a = rng.random_range(2..=5);
        let gamma = [0.8, 0.9, 0.99][trial % 3];
        let tau = [0.0, 0.5, 2.0][(trial / 3) % 3];
        let mdp = TabularMdp::random(s, a, gamma, &mut rng)?;
        let pi = SoftmaxPolicy::random(s, a, &mut rng);
        let exact = exact_policy_gradient(&mdp, &pi, tau)?;
        let fd = extrapolated_difference_gradient(&mdp, &pi, tau, 1e-3)?;
        worst = worst.max(violation(&fd, &exact, 1e-6, 1e-9));
    }
    let mut out = vec![Check::new(
        "gradcheck",
        "soft policy gradient vs finite differences, 100 random MDPs (violation ratio)",
        worst,
        1.0,
    )];

    let (r0, r1, gamma, tau, t) = (1.0, -0.5, 0.8, 0.7, 0.3);
    let mdp = TabularMdp::new(1, 2, gamma, vec![1.0], vec![1.0, 1.0], vec![r0, r1])?;
    let p = 1.0 / (1.0 + (-2.0f64 * t).exp());
    let hand = 2.0 * p * (1.0 - p) * (r0 - r1 + tau * ((1.0 - p) / p).ln()) / (1.0 - gamma);
    let g = exact_policy_gradient(&mdp, &SoftmaxPolicy::new(1, 2, vec![t, -t])?, tau)?;
    out.push(Check::new("gradcheck", "tied-logit derivative by hand", (g[0] - g[1] - hand).abs(), 1e-10));

    let mut worst_net: f64 = 0.0;
    for _ in 0..5 {
        let (net, d) = random_mlp(&mut rng)?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst_net = worst_net.max(network_gradcheck(&net, &x, &c, 1e-6)?);
    }
    out.push(Check::new("gradcheck", "network backward vs central differences", worst_net, 1e-6));

    let mut worst_score: f64 = 0.0;
    for _ in 0..5 {
        let sd = rng.random_range(1..=4);
        let ad = rng.random_range(1..=3);
        let h = rng.random_range(4..=32);
        let pi = GaussianPolicy::new(sd, ad, &[h, h], 1e-3, &mut rng)?;
        let s: Vec<f64> = (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..ad).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst_score = worst_score.max(score_gradcheck(&pi, &s, &a, 1e-6)?);
    }
    out.push(Check::new("gradcheck", "score gradient vs central differences", worst_score, 1e-5));
    Ok(out)
}

/// The fixed 5x3 MDP, policy and arbitrary target table used by the backup checks.
pub fn backup_fixture(seed: u64) -> Result<(TabularMdp, SoftmaxPolicy, QTable)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c0);
    let mdp = TabularMdp::random(5, 3, 0.9, &mut rng)?;
    let pi = SoftmaxPolicy::random(5, 3, &mut rng);
    let q = QTable {
        states: 5,
        actions: 3,
        values: (0..15).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    Ok((mdp, pi, q))
}

fn draw_next<R: Rng>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, p) in mdp.transition_row(s, a).iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    mdp.states() - 1
}

/// `count` sampled backups of `(s, a)`: each draws `s' ~ P(.|s, a)` unless
/// `fixed_next` pins it, then `m` actions from the policy at `s'`.
pub fn sampled_backups_at<R: Rng>(
    mdp: &TabularMdp,
    pi: &SoftmaxPolicy,
    q: &QTable,
    tau: f64,
    s: usize,
    a: usize,
    m: usize,
    count: usize,
    fixed_next: Option<usize>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    use crate::agent::StochasticActor;
    let next: Vec<usize> = (0..count)
        .map(|_| fixed_next.unwrap_or_else(|| draw_next(mdp, s, a, rng)))
        .collect();
    let refs: Vec<&usize> = next.iter().collect();
    let next_actions: Vec<Vec<ActionSample<usize>>> = pi.sample_actions(&refs, m, rng)?;
    let batch = BackupBatch {
        rewards: vec![mdp.r(s, a); count],
        next_states: next.clone(),
        terminal: vec![false; count],
        next_actions,
        analytic_entropy: None,
    };
    sampled_backup(q, &batch, mdp.gamma(), tau)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn backup(seed: u64) -> Result<Vec<Check>> {
    let (mdp, pi, q) = backup_fixture(seed)?;
    let tau = 1.0;
    let exact = soft_backup_operator(&mdp, &pi, tau, &q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_z: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    let mut table = Vec::new();
    for s in 0..5 {
        for a in 0..3 {
            let ys = sampled_backups_at(&mdp, &pi, &q, tau, s, a, 1, 100_000, None, &mut rng)?;
            let (mean, var) = mean_var(&ys);
            let se = (var / ys.len() as f64).sqrt();
            worst_z = worst_z.max((mean - exact.get(s, a)).abs() / se);
            table.push(format!("({s},{a}) {mean:.4} vs {:.4} +- {se:.4}", exact.get(s, a)));

            let next = draw_next(&mdp, s, a, &mut rng);
            let one = sampled_backups_at(&mdp, &pi, &q, tau, s, a, 1, 20_000, Some(next), &mut rng)?;
            let many = sampled_backups_at(&mdp, &pi, &q, tau, s, a, 64, 20_000, Some(next), &mut rng)?;
            let (_, v1) = mean_var(&one);
            let (_, v64) = mean_var(&many);
            if v1 > 0.0 {
                worst_ratio = worst_ratio.max(v64 / v1);
            }
        }
    }
    let mut out = vec![
        Check::new("backup", "M=1 sampled backup mean vs exact operator (standard errors)", worst_z, 3.0)
            .with_detail(format!("1e5 backups per pair; sample mean vs exact +- SE: {}", table.join(", "))),
        Check::new("backup", "M=64 over M=1 variance ratio", worst_ratio, 1.0 / 32.0)
            .with_detail("ideal 1/64, next state held fixed".into()),
    ];

    // the soft fixed point of a 1-state, 2-action MDP is reproduced by the backup
    let mdp1 = TabularMdp::new(1, 2, 0.9, vec![1.0], vec![1.0, 1.0], vec![1.0, 1.0])?;
    let uni = SoftmaxPolicy::uniform(1, 2);
    let q1 = exact_soft_q(&mdp1, &uni, 1.0)?;
    let ys = sampled_backups_at(&mdp1, &uni, &q1, 1.0, 0, 0, 1, 100, None, &mut rng)?;
    let dev = ys.iter().map(|y| (y - q1.get(0, 0)).abs()).fold(0.0, f64::max);
    out.push(Check::new("backup", "symmetric soft fixed point reproduced", dev, 1e-10));

    // targets only enter the critic gradient through the residual
    let critic = SoftQ::new(2, 1, &[8], &mut rng)?;
    let states: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let actions: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shifted: Vec<f64> = y.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let (_, g0) = critic.soft_loss(&states, &actions, &y)?;
    let (_, g1) = critic.soft_loss(&states, &actions, &shifted)?;
    let mut predicted = g0.clone();
    for i in 0..6 {
        let input: Vec<f64> = states[i].iter().chain(&actions[i]).copied().collect();
        let (_, tape) = critic.online().forward(&input)?;
        let (mut dq, _) = critic.online().backward(&tape, &[1.0])?;
        dq.scale(-2.0 * delta[i] / 6.0);
        predicted.add_assign(&dq)?;
    }
    out.push(Check::new(
        "backup",
        "target shift moves the critic gradient only through the residual",
        norm_rel_error(&g1.flatten(), &predicted.flatten()),
        1e-12,
    ));
    Ok(out)
}

fn estimator(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp::random(3, 2, 0.9, &mut rng)?;
    let pi = SoftmaxPolicy::random(3, 2, &mut rng);
    let tau = 0.5;
    let exact = exact_policy_gradient(&mdp, &pi, tau)?;
    let est = mc_gradient_estimate(&mdp, &pi, tau, 1_000_000, &mut rng)?;
    let z = exact
        .iter()
        .zip(est.mean.iter().zip(&est.std_err))
        .map(|(e, (m, se))| (m - e).abs() / se.max(1e-300))
        .fold(0.0, f64::max);
    let mut out = vec![Check::new("estimator", "occupancy-sampled estimate at K=1e6 (standard errors)", z, 4.0)];

    let drop = exact_policy_gradient_with(&mdp, &pi, tau, ConstantTerm::Drop)?;
    let diff = exact.iter().zip(&drop).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(Check::new("estimator", "dropping the constant leaves the exact gradient", diff, 1e-10));

    // a frozen Gaussian policy and network critic: the spread of the mean of
    // K estimates shrinks like 1/sqrt(K)
    let policy = GaussianPolicy::new(2, 1, &[8], 1e-3, &mut rng)?;
    let critic = SoftQ::new(2, 1, &[8], &mut rng)?;
    let states = vec![vec![0.2, -0.4], vec![-0.7, 0.1]];
    let refs: Vec<&Vec<f64>> = states.iter().collect();
    let single: Vec<Vec<f64>> = (0..10_000)
        .map(|_| Ok(actor_gradient(&policy, &critic.view(false), &refs, 4, 0.5, &mut rng)?.flatten()))
        .collect::<Result<_>>()?;
    // standard error of the mean of the first K estimates, summed over coordinates
    let std_err = |k: usize| -> f64 {
        let total: f64 = (0..single[0].len())
            .map(|i| {
                let col: Vec<f64> = single[..k].iter().map(|g| g[i]).collect();
                mean_var(&col).1 / k as f64
            })
            .sum();
        total.sqrt()
    };
    let ratio = std_err(100) / std_err(10_000);
    out.push(Check::new(
        "estimator",
        "actor-gradient spread ratio K=1e2 vs 1e4, distance outside [5, 20]",
        (5.0 - ratio).max(ratio - 20.0).max(0.0),
        0.0,
    )
    .with_detail(format!("ratio {ratio:.2}")));

    // the actor estimator on a softmax policy with the exact Q plugged in
    let q = exact_soft_q(&mdp, &pi, tau)?;
    let rho = discounted_occupancy(&mdp, &pi)?;
    let mass: f64 = rho.iter().sum();
    let samples = 1_000_000;
    let (mut sum, mut sum_sq) = (vec![0.0; 6], vec![0.0; 6]);
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u: f64 = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        let mut s = rho.len() - 1;
        for (k, r) in rho.iter().enumerate() {
            acc += r;
            if u < acc {
                s = k;
                break;
            }
        }
        draws.push(s);
    }
    for s in &draws {
        let g = actor_gradient(&pi, &q, &[s], 1, tau, &mut rng)?;
        for (k, v) in g.iter().enumerate() {
            let x = v * mass;
            sum[k] += x;
            sum_sq[k] += x * x;
        }
    }
    let n = samples as f64;
    let mut worst: f64 = 0.0;
    for k in 0..6 {
        let mean = sum[k] / n;
        let se = ((sum_sq[k] - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt();
        worst = worst.max((mean - exact[k]).abs() / se.max(1e-300));
    }
    out.push(Check::new("estimator", "actor estimator with exact Q at 1e6 samples (standard errors)", worst, 4.0));

    let policy = GaussianPolicy::new(2, 2, &[6], 1e-3, &mut rng)?;
    let state = vec![0.4, -0.3];
    let z = constant_critic_zero_mean(&policy, &state, 100_000, &mut rng)?;
    out.push(Check::new("estimator", "constant critic at tau=0 gives zero mean (standard errors)", z, 4.0));
    Ok(out)
}

struct ConstCritic(f64);

impl<S, A> ActionValue<S, A> for ConstCritic {
    fn values(&self, pairs: &[(&S, &A)]) -> Result<Vec<f64>> {
        Ok(vec![self.0; pairs.len()])
    }
}

/// Largest `|mean| / SE` over coordinates of single-sample actor gradients
/// against a constant critic with no entropy term.
fn constant_critic_zero_mean<R: Rng>(policy: &GaussianPolicy, state: &Vec<f64>, samples: usize, rng: &mut R) -> Result<f64> {
    let dim = policy.flatten().len();
    let (mut sum, mut sum_sq) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..samples {
        let g = actor_gradient(policy, &ConstCritic(2.0), &[state], 1, 0.0, rng)?.flatten();
        for (k, v) in g.iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = samples as f64;
    let mut worst: f64 = 0.0;
    for k in 0..dim {
        let mean = sum[k] / n;
        let var = (sum_sq[k] - n * mean * mean).max(0.0) / (n - 1.0);
        if var > 0.0 {
            worst = worst.max(mean.abs() / (var / n).sqrt());
        } else {
            worst = worst.max(if mean == 0.0 { 0.0 } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

fn algebra(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, _) = random_mlp(&mut rng)?;
    let mut g = Gradient::zeros_like(&net);
    for v in g.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let original = g.flatten();
    let norm = original.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_norm = norm / 3.0;
    let mut clipped = g.clone();
    let outcome = clip_by_global_norm(&mut [&mut clipped], max_norm)?;
    let mut out = vec![Check::new(
        "algebra",
        "clipped norm hits the bound (relative)",
        (outcome.norm_after - max_norm).abs() / max_norm,
        1e-12,
    )];
    let mut again = clipped.clone();
    clip_by_global_norm(&mut [&mut again], max_norm)?;
    out.push(Check::new(
        "algebra",
        "clipping is idempotent",
        norm_rel_error(&again.flatten(), &clipped.flatten()),
        0.0,
    ));
    let direction = original
        .iter()
        .zip(clipped.flatten())
        .map(|(o, c)| (c - o * outcome.scale).abs())
        .fold(0.0, f64::max);
    out.push(Check::new("algebra", "clipping preserves direction", direction, 1e-15));

    let (online, _) = random_mlp(&mut rng)?;
    let mut target = online.clone();
    target.unflatten(&online.flatten().iter().map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())?;
    let before = target.flatten();
    let alpha = 0.01;
    polyak_update(&mut target, &online, alpha)?;
    let after = target.flatten();
    let theta = online.flatten();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let gap = dist(&theta, &before);
    out.push(Check::new(
        "algebra",
        "Polyak step length equals alpha times the gap",
        (dist(&after, &before) - alpha * gap).abs(),
        1e-12,
    ));
    let outside = (0..theta.len())
        .map(|i| {
            let (lo, hi) = (theta[i].min(before[i]), theta[i].max(before[i]));
            (lo - after[i]).max(after[i] - hi).max(0.0)
        })
        .fold(0.0, f64::max);
    out.push(Check::new("algebra", "Polyak output is a convex combination", outside, 0.0));

    let mut net2 = online.clone();
    let zero = Gradient::zeros_like(&net2);
    for _ in 0..3 {
        net2.adam_step(&zero, &AdamConfig::with_lr(0.1), Direction::Descend)?;
    }
    out.push(Check::new(
        "algebra",
        "Adam with zero gradient keeps parameters",
        norm_rel_error(&net2.flatten(), &online.flatten()),
        0.0,
    ));

    // target lag inside a full train step
    let mut buffer = ReplayBuffer::new(32, 2, 1)?;
    for _ in 0..16 {
        buffer.push(Transition {
            state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            action: vec![rng.random_range(-1.0..1.0)],
            reward: rng.random_range(-1.0..1.0),
            next_state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            terminal: false,
            truncated: false,
        })?;
    }
    let cfg = AgentConfig {
        batch_size: 8,
        action_samples: 4,
        hidden_sizes: vec![8],
        buffer_capacity: 32,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(cfg, 2, 1, &mut rng)?;
    let mut worst_lag: f64 = 0.0;
    let mut worst_clip: f64 = 0.0;
    for _ in 0..5 {
        let old = agent.target_policy.flatten();
        let old_q = agent.critic.target().flatten();
        let stats = agent.train_step(&buffer, &mut rng)?;
        worst_clip = worst_clip.max(stats.grad_norm_post - agent.config.clip_norm);
        for (new, old, online) in [
            (agent.target_policy.flatten(), old, agent.policy.flatten()),
            (agent.critic.target().flatten(), old_q, agent.critic.online().flatten()),
        ] {
            let gap = dist(&online, &old);
            worst_lag = worst_lag.max((dist(&new, &old) - alpha * gap).abs());
        }
    }
    out.push(Check::new("algebra", "train-step target lag equals alpha times the gap", worst_lag, 1e-12));
    out.push(Check::new("algebra", "post-clip actor gradient norm above the bound", worst_clip.max(0.0), 0.0));

    // the same bound read back from a training run's metrics
    let run_config = AgentConfig {
        total_env_steps: 600,
        warmup: 200,
        batch_size: 16,
        action_samples: 4,
        hidden_sizes: vec![8],
        clip_norm: 0.01,
        log_interval: 50,
        eval_interval: 600,
        eval_episodes: 1,
        seed,
        ..AgentConfig::default()
    };
    let mut sink = MemorySink::default();
    run_training(&run_config, &mut sink)?;
    let logged: Vec<f64> = sink.trains().iter().filter_map(|r| r.grad_norm_post_max).collect();
    let excess = if logged.is_empty() {
        f64::INFINITY
    } else {
        logged.iter().map(|n| (n - run_config.clip_norm).max(0.0)).fold(0.0, f64::max)
    };
    out.push(Check::new("algebra", "largest logged post-clip norm above the bound", excess, 0.0));
    Ok(out)
}

fn policy_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = GaussianPolicy::new(1, 1, &[8], 1e-3, &mut rng)?;
    let state = [0.3];
    let out0 = policy.forward(&state)?;
    let (mu, sigma) = (out0.mean[0], out0.std[0]);
    // composite Simpson over +-10 sigma
    let n = 20_000;
    let (lo, hi) = (mu - 10.0 * sigma, mu + 10.0 * sigma);
    let h = (hi - lo) / n as f64;
    let mut integral = 0.0;
    for k in 0..=n {
        let x = lo + k as f64 * h;
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += w * policy.log_prob(&state, &[x])?.exp();
    }
    integral *= h / 3.0;
    let mut out = vec![Check::new("policy", "density integrates to one", (integral - 1.0).abs(), 1e-6)];

    let policy2 = GaussianPolicy::new(3, 2, &[8], 1e-3, &mut rng)?;
    let s2 = [0.1, -0.5, 0.9];
    let draws = policy2.sample(&s2, 100_000, &mut rng)?;
    let neg: Vec<f64> = draws.iter().map(|d| -d.log_prob).collect();
    let (mean, var) = mean_var(&neg);
    let closed = gaussian_entropy(&policy2.forward(&s2)?.std);
    let api = policy2.entropy(&s2)?;
    out.push(Check::new("policy", "entropy matches closed form", (api - closed).abs(), 1e-12));
    out.push(Check::new(
        "policy",
        "entropy matches Monte-Carlo mean of -log prob (standard errors)",
        (mean - closed).abs() / (var / neg.len() as f64).sqrt(),
        4.0,
    ));

    let dim = policy2.flatten().len();
    let (mut sum, mut sum_sq) = (vec![0.0; dim], vec![0.0; dim]);
    for d in &draws {
        for (k, v) in policy2.score_grad(&s2, &d.action)?.flatten().iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = draws.len() as f64;
    let mut worst: f64 = 0.0;
    for k in 0..dim {
        let m = sum[k] / n;
        let var = (sum_sq[k] - n * m * m).max(0.0) / (n - 1.0);
        if var > 0.0 {
            worst = worst.max(m.abs() / (var / n).sqrt());
        }
    }
    out.push(Check::new("policy", "score function has zero mean (standard errors)", worst, 4.0));
    Ok(out)
}

fn tabular_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual: f64 = 0.0;
    let mut series: f64 = 0.0;
    let mut forms: f64 = 0.0;
    let mut collapse_q: f64 = 0.0;
    let mut collapse_g: f64 = 0.0;
    for trial in 0..30 {
        let s = rng.random_range(1..=20);
        let a = rng.random_range(1..=5);
        let gamma = [0.8, 0.9, 0.95][trial % 3];
        let tau = [0.0, 0.5, 2.0][(trial / 3) % 3];
        let mdp = TabularMdp::random(s, a, gamma, &mut rng)?;
        let pi = SoftmaxPolicy::random(s, a, &mut rng);
        let q = exact_soft_q(&mdp, &pi, tau)?;
        residual = residual.max(soft_bellman_residual(&mdp, &pi, tau, &q));
        let rho = discounted_occupancy(&mdp, &pi)?;
        let approx = occupancy_series(&mdp, &pi, 500);
        series = series.max(rho.iter().zip(&approx).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        forms = forms.max((exact_objective(&mdp, &pi, tau)? - objective_from_q(&mdp, &pi, tau)?).abs());
        if trial < 10 {
            let soft = exact_soft_q(&mdp, &pi, 0.0)?;
            let plain = iterative_policy_evaluation(&mdp, &pi, 1e-13, 100_000)?;
            collapse_q = collapse_q.max(soft.values.iter().zip(&plain.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let g = exact_policy_gradient(&mdp, &pi, 0.0)?;
            let c = classical_policy_gradient(&mdp, &pi)?;
            collapse_g = collapse_g.max(g.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    let mut out = vec![
        Check::new("tabular", "soft Bellman residual of the exact solve", residual, 1e-10),
        Check::new("tabular", "occupancy solve vs truncated series", series, 1e-8),
        Check::new("tabular", "objective via occupancy vs via Q", forms, 1e-10),
        Check::new("tabular", "zero-temperature Q vs iterative evaluation", collapse_q, 1e-9),
        Check::new("tabular", "zero-temperature gradient vs classical theorem", collapse_g, 1e-8),
    ];

    let mdp = TabularMdp::random(4, 3, 0.9, &mut rng)?;
    let mut pi = SoftmaxPolicy::random(4, 3, &mut rng);
    let mut j = exact_objective(&mdp, &pi, 1.0)?;
    let mut worst_drop: f64 = 0.0;
    for _ in 0..200 {
        let g = exact_policy_gradient(&mdp, &pi, 1.0)?;
        let next: Vec<f64> = pi.logits().iter().zip(&g).map(|(t, d)| t + 0.1 * d).collect();
        pi = pi.with_logits(next)?;
        let j2 = exact_objective(&mdp, &pi, 1.0)?;
        worst_drop = worst_drop.max(j - j2);
        j = j2;
    }
    out.push(Check::new("tabular", "exact-gradient ascent never lowers the objective", worst_drop.max(0.0), 1e-12));
    Ok(out)
}
