//! Acceptance suite. Runs each criterion in turn, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.
//!
//! `SOFTGRAD_ACCEPTANCE=1,4,5` restricts the run to the listed criteria.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softgrad::agent::{run_training, MemorySink, StochasticActor};
use softgrad::tabular::{
    discounted_occupancy, exact_objective, exact_policy_gradient, exact_policy_gradient_with, exact_soft_q,
    mc_gradient_estimate, soft_backup_operator, ConstantTerm, QTable, SoftmaxPolicy, TabularMdp,
};
use softgrad::{
    actor_gradient, clip_by_global_norm, global_norm, make_env, polyak_update, sampled_backup, Activation, AgentConfig,
    BackupBatch, GaussianPolicy, Gradient, Mlp, ReplayBuffer, Transition,
};

struct Outcome {
    passed: bool,
    summary: String,
}

fn fixture(name: &str) -> TabularMdp {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "fixtures", name].iter().collect();
    TabularMdp::load(&path).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// 1. exact gradient against central differences of the objective

fn central_difference(mdp: &TabularMdp, pi: &SoftmaxPolicy, tau: f64, h: f64) -> Vec<f64> {
    let theta = pi.logits().to_vec();
    (0..theta.len())
        .map(|i| {
            let mut up = theta.clone();
            up[i] += h;
            let mut down = theta.clone();
            down[i] -= h;
            let jp = exact_objective(mdp, &pi.with_logits(up).unwrap(), tau).unwrap();
            let jm = exact_objective(mdp, &pi.with_logits(down).unwrap(), tau).unwrap();
            (jp - jm) / (2.0 * h)
        })
        .collect()
}

fn criterion_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (rel, floor) = (1e-6, 1e-9);
    let (mut trials, mut coords, mut bad, mut worst) = (0, 0, 0, 0.0f64);
    let (mut plain_bad, mut plain_worst) = (0, 0.0f64);
    for &gamma in &[0.8, 0.9, 0.99] {
        for &tau in &[0.0, 0.5, 2.0] {
            for _ in 0..12 {
                let s = rng.random_range(1..=20);
                let a = rng.random_range(2..=5);
                let mdp = TabularMdp::random(s, a, gamma, &mut rng).unwrap();
                let pi = SoftmaxPolicy::random(s, a, &mut rng);
                let exact = exact_policy_gradient(&mdp, &pi, tau).unwrap();
                // Richardson combination of two central differences cancels
                // the h^2 term, so a step well above the roundoff floor can be used
                let h = 1e-3;
                let coarse = central_difference(&mdp, &pi, tau, h);
                let fine = central_difference(&mdp, &pi, tau, h / 2.0);
                let plain = central_difference(&mdp, &pi, tau, 1e-6);
                for k in 0..exact.len() {
                    let fd = (4.0 * fine[k] - coarse[k]) / 3.0;
                    let tol = rel * exact[k].abs() + floor;
                    let err = (fd - exact[k]).abs();
                    worst = worst.max(err / tol);
                    bad += usize::from(err > tol);
                    let perr = (plain[k] - exact[k]).abs();
                    plain_worst = plain_worst.max(perr / tol);
                    plain_bad += usize::from(perr > tol);
                }
                coords += exact.len();
                trials += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "    info: single-step central differences at h=1e-6 exceed the bound on {plain_bad}/{coords} coordinates (worst {plain_worst:.2}x), roundoff in the objective"
    );
    Outcome {
        passed: bad == 0 && trials >= 100 && secs < 30.0,
        summary: format!(
            "{trials} MDPs, {coords} coordinates, {bad} outside rel 1e-6 / abs 1e-9 (worst {worst:.3}x of tolerance), {secs:.1}s (limit 30s)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. sampled backup against the exact operator

/// `r + gamma * sum_s' P(s'|s,a) sum_a' pi(a'|s') (Q(s',a') - tau log pi(a'|s'))`.
fn exact_backup(mdp: &TabularMdp, pi: &SoftmaxPolicy, q: &QTable, tau: f64, s: usize, a: usize) -> f64 {
    let mut next = 0.0;
    for (t, &p) in mdp.transition_row(s, a).iter().enumerate() {
        let probs = pi.probs_row(t);
        let lps = pi.log_probs_row(t);
        let v: f64 = (0..mdp.actions()).map(|b| probs[b] * (q.get(t, b) - tau * lps[b])).sum();
        next += p * v;
    }
    mdp.r(s, a) + mdp.gamma() * next
}

fn backups<R: Rng>(
    mdp: &TabularMdp,
    pi: &SoftmaxPolicy,
    q: &QTable,
    tau: f64,
    (s, a): (usize, usize),
    m: usize,
    count: usize,
    fixed_next: Option<usize>,
    rng: &mut R,
) -> Vec<f64> {
    let next: Vec<usize> = (0..count)
        .map(|_| fixed_next.unwrap_or_else(|| categorical(mdp.transition_row(s, a), rng)))
        .collect();
    let refs: Vec<&usize> = next.iter().collect();
    let batch = BackupBatch {
        rewards: vec![mdp.r(s, a); count],
        next_actions: pi.sample_actions(&refs, m, rng).unwrap(),
        next_states: next,
        terminal: vec![false; count],
        analytic_entropy: None,
    };
    sampled_backup(q, &batch, mdp.gamma(), tau).unwrap()
}

fn criterion_backup() -> Outcome {
    let start = Instant::now();
    let mdp = fixture("random_5x3.json");
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let pi = SoftmaxPolicy::random(5, 3, &mut rng);
    let q = QTable {
        states: 5,
        actions: 3,
        values: (0..15).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    let tau = 1.0;
    let library = soft_backup_operator(&mdp, &pi, tau, &q);
    let (mut worst_z, mut worst_ratio, mut oracle_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut all_within = true;
    for s in 0..5 {
        for a in 0..3 {
            let exact = exact_backup(&mdp, &pi, &q, tau, s, a);
            oracle_gap = oracle_gap.max((exact - library.get(s, a)).abs());
            let ys = backups(&mdp, &pi, &q, tau, (s, a), 1, 100_000, None, &mut rng);
            let (mean, var) = mean_var(&ys);
            let z = (mean - exact).abs() / (var / ys.len() as f64).sqrt();
            worst_z = worst_z.max(z);
            all_within &= z <= 3.0;

            // a stored transition fixes s'; only the M next actions are resampled
            let next = categorical(mdp.transition_row(s, a), &mut rng);
            let (_, v1) = mean_var(&backups(&mdp, &pi, &q, tau, (s, a), 1, 20_000, Some(next), &mut rng));
            let (_, v64) = mean_var(&backups(&mdp, &pi, &q, tau, (s, a), 64, 20_000, Some(next), &mut rng));
            worst_ratio = worst_ratio.max(v64 / v1);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: all_within && worst_ratio <= 1.0 / 32.0 && oracle_gap <= 1e-12 && secs < 60.0,
        summary: format!(
            "worst |mean - exact| = {worst_z:.2} SE (limit 3), worst Var(M=64)/Var(M=1) = {worst_ratio:.4} (limit 0.03125), library operator vs oracle {oracle_gap:.1e}, {secs:.1}s (limit 60s)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 3. Monte-Carlo estimators against the exact gradient

fn criterion_estimator() -> Outcome {
    let mdp = fixture("random_3x2.json");
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let pi = SoftmaxPolicy::random(3, 2, &mut rng);
    let tau = 0.5;
    let exact = exact_policy_gradient(&mdp, &pi, tau).unwrap();
    let est = mc_gradient_estimate(&mdp, &pi, tau, 1_000_000, &mut rng).unwrap();
    let z_mc = exact
        .iter()
        .zip(est.mean.iter().zip(&est.std_err))
        .map(|(e, (m, se))| (m - e).abs() / se)
        .fold(0.0, f64::max);

    let dropped = exact_policy_gradient_with(&mdp, &pi, tau, ConstantTerm::Drop).unwrap();
    let drop_gap = exact.iter().zip(&dropped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // the actor estimator fed states from the normalised occupancy and the exact Q
    let q = exact_soft_q(&mdp, &pi, tau).unwrap();
    let rho = discounted_occupancy(&mdp, &pi).unwrap();
    let mass: f64 = rho.iter().sum();
    let weights: Vec<f64> = rho.iter().map(|r| r / mass).collect();
    let k = 1_000_000;
    let (mut sum, mut sum_sq) = (vec![0.0; 6], vec![0.0; 6]);
    for _ in 0..k {
        let s = categorical(&weights, &mut rng);
        let g = actor_gradient(&pi, &q, &[&s], 1, tau, &mut rng).unwrap();
        for (i, v) in g.iter().enumerate() {
            sum[i] += v * mass;
            sum_sq[i] += (v * mass).powi(2);
        }
    }
    let n = k as f64;
    let z_actor = (0..6)
        .map(|i| {
            let mean = sum[i] / n;
            let se = ((sum_sq[i] - n * mean * mean) / (n - 1.0) / n).sqrt();
            (mean - exact[i]).abs() / se
        })
        .fold(0.0, f64::max);
    Outcome {
        passed: z_mc <= 4.0 && z_actor <= 4.0 && drop_gap <= 1e-10,
        summary: format!(
            "K=1e6 occupancy estimate worst {z_mc:.2} SE, actor estimator worst {z_actor:.2} SE (limit 4), constant dropped changes gradient by {drop_gap:.1e} (limit 1e-10)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 4. backpropagation against central differences

fn relative(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / l2(a).max(l2(b))
}

fn criterion_network_gradcheck() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-6;
    let mut worst_net = 0.0f64;
    for _ in 0..10 {
        let d = rng.random_range(1..=8);
        let w1 = rng.random_range(2..=64);
        let w2 = rng.random_range(2..=64);
        let out = rng.random_range(1..=4);
        let act = [Activation::Relu, Activation::Sigmoid][rng.random_range(0..2)];
        let net = Mlp::new(d, &[(w1, act), (w2, Activation::Relu), (out, Activation::Identity)], &mut rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, tape) = net.forward(&x).unwrap();
        let (grad, _) = net.backward(&tape, &c).unwrap();
        let theta = net.flatten();
        let mut probe = net.clone();
        let mut f = |p: &[f64]| {
            probe.unflatten(p).unwrap();
            let (y, _) = probe.forward(&x).unwrap();
            y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                up[i] += h;
                let mut down = theta.clone();
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        worst_net = worst_net.max(relative(&grad.flatten(), &fd));
    }

    let mut worst_score = 0.0f64;
    for _ in 0..10 {
        let sd = rng.random_range(1..=6);
        let ad = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=64)).collect();
        let pi = GaussianPolicy::new(sd, ad, &hidden, 1e-3, &mut rng).unwrap();
        let s: Vec<f64> = (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..ad).map(|_| rng.random_range(-1.5..1.5)).collect();
        let exact = pi.score_grad(&s, &a).unwrap().flatten();
        let theta = pi.flatten();
        let mut probe = pi.clone();
        let mut f = |p: &[f64]| {
            probe.unflatten(p).unwrap();
            probe.log_prob(&s, &a).unwrap()
        };
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                up[i] += h;
                let mut down = theta.clone();
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        worst_score = worst_score.max(relative(&exact, &fd));
    }
    Outcome {
        passed: worst_net <= 1e-6 && worst_score <= 1e-5,
        summary: format!(
            "backward worst relative error {worst_net:.2e} (limit 1e-6), score_grad worst {worst_score:.2e} (limit 1e-5), 10 nets each"
        ),
    }
}

// ---------------------------------------------------------------------------
// 5. clipping and Polyak averaging

fn random_gradient<R: Rng>(net: &Mlp, scale: f64, rng: &mut R) -> Gradient {
    let mut g = Gradient::zeros_like(net);
    for v in g.iter_mut() {
        *v = scale * rng.random_range(-1.0..1.0);
    }
    g
}

fn criterion_clip_polyak() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ok = true;
    let (mut worst_bound, mut worst_hit, mut worst_lag) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst_recompute = 0.0f64;
    for trial in 0..50 {
        let net = Mlp::new(4, &[(16, Activation::Relu), (3, Activation::Identity)], &mut rng).unwrap();
        let max_norm = 5.0;
        let mut g = random_gradient(&net, [0.01, 1.0, 100.0][trial % 3], &mut rng);
        let mut h = random_gradient(&net, 1.0, &mut rng);
        let before: Vec<f64> = g.flatten().into_iter().chain(h.flatten()).collect();
        let norm = l2(&before);
        clip_by_global_norm(&mut [&mut g, &mut h], max_norm).unwrap();
        let after: Vec<f64> = g.flatten().into_iter().chain(h.flatten()).collect();
        // the bound holds exactly for the library's norm; an independent sum
        // in another order may differ from it by rounding
        let post = global_norm(&[&g, &h]);
        worst_bound = worst_bound.max(post - max_norm);
        ok &= post <= max_norm;
        worst_recompute = worst_recompute.max((l2(&after) - post).abs() / post.max(1e-300));
        if norm > max_norm {
            worst_hit = worst_hit.max((post - max_norm).abs() / max_norm);
        } else {
            ok &= after == before;
        }
    }
    ok &= worst_hit <= 1e-12 && worst_recompute <= 1e-12;

    for &alpha in &[0.01, 0.3, 1.0] {
        for _ in 0..10 {
            let online = Mlp::new(3, &[(32, Activation::Relu), (2, Activation::Identity)], &mut rng).unwrap();
            let mut target = Mlp::new(3, &[(32, Activation::Relu), (2, Activation::Identity)], &mut rng).unwrap();
            let old = target.flatten();
            polyak_update(&mut target, &online, alpha).unwrap();
            let lag = (dist(&target.flatten(), &old) - alpha * dist(&online.flatten(), &old)).abs();
            worst_lag = worst_lag.max(lag);
        }
    }

    // the same identities inside full train steps
    let mut buffer = ReplayBuffer::new(64, 2, 1).unwrap();
    for _ in 0..64 {
        let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        buffer
            .push(Transition {
                next_state: vec![s[0] * 0.9, s[1]],
                state: s,
                action: vec![rng.random_range(-2.0..2.0)],
                reward: rng.random_range(-1.0..0.0),
                terminal: false,
                truncated: false,
            })
            .unwrap();
    }
    let config = AgentConfig {
        batch_size: 16,
        action_samples: 8,
        hidden_sizes: vec![16, 16],
        clip_norm: 0.05,
        buffer_capacity: 64,
        ..AgentConfig::default()
    };
    let alpha = config.polyak_alpha;
    let mut agent = softgrad::Agent::new(config, 2, 1, &mut rng).unwrap();
    let mut step_bound = 0.0f64;
    for _ in 0..20 {
        let old_pi = agent.target_policy.flatten();
        let old_q = agent.critic.target().flatten();
        let stats = agent.train_step(&buffer, &mut rng).unwrap();
        step_bound = step_bound.max(stats.grad_norm_post - agent.config.clip_norm);
        ok &= stats.grad_norm_post <= agent.config.clip_norm;
        let lag_pi = (dist(&agent.target_policy.flatten(), &old_pi) - alpha * dist(&agent.policy.flatten(), &old_pi)).abs();
        let lag_q = (dist(&agent.critic.target().flatten(), &old_q) - alpha * dist(&agent.critic.online().flatten(), &old_q)).abs();
        worst_lag = worst_lag.max(lag_pi).max(lag_q);
    }
    ok &= worst_lag <= 1e-12;
    Outcome {
        passed: ok,
        summary: format!(
            "post-clip norm over bound by at most {:.1e} (independent recomputation within {worst_recompute:.1e}), clipped norms hit the bound within {worst_hit:.1e} relative (limit 1e-12), train-step excess {:.1e}, Polyak lag error {worst_lag:.1e} (limit 1e-12)",
            worst_bound.max(0.0),
            step_bound.max(0.0)
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. continuous bandit

fn criterion_bandit() -> Outcome {
    let start = Instant::now();
    let train_steps = 5000;
    let mut config = AgentConfig {
        env: "continuous-bandit".into(),
        gamma: 0.0,
        hidden_sizes: vec![64, 64],
        seed: 7,
        eval_interval: 1000,
        ..AgentConfig::default()
    };
    // learning begins on the step that fills the buffer to the warmup size
    let first_learning_step = config.warmup.max(config.batch_size);
    config.total_env_steps = first_learning_step - 1 + train_steps / config.train_steps_per_env_step;
    let mut sink = MemorySink::default();
    let summary = run_training(&config, &mut sink).unwrap();
    let agent = &summary.agent;
    let mean = agent.policy.mean_action(&[1.0]).unwrap()[0];
    let grid = 201;
    let mse = (0..grid)
        .map(|i| {
            let a = -1.0 + 2.0 * i as f64 / (grid - 1) as f64;
            let q = agent.critic.q_value(&[1.0], &[a], false).unwrap() / config.reward_scale;
            (q + a * a).powi(2)
        })
        .sum::<f64>()
        / grid as f64;
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: summary.train_steps == train_steps && mean.abs() <= 0.1 && mse <= 0.05 && secs < 120.0,
        summary: format!(
            "{} train steps, policy mean {mean:.4} (limit 0.1), critic MSE vs -a^2 {mse:.2e} (limit 0.05), {secs:.1}s (limit 120s)",
            summary.train_steps
        ),
    }
}

// ---------------------------------------------------------------------------
// 7 and 8. point-mass learning and determinism

fn point_mass_config(seed: u64) -> AgentConfig {
    AgentConfig {
        env: "point-mass-2d".into(),
        total_env_steps: 50_000,
        eval_interval: 5_000,
        hidden_sizes: vec![16, 16],
        seed,
        ..AgentConfig::default()
    }
}

/// Returns of a scripted policy drawing uniform actions within the bounds.
fn random_baseline(episodes: usize, seed: u64) -> (f64, f64) {
    let mut env = make_env("point-mass-2d", seed).unwrap();
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            env.reset();
            let mut total = 0.0;
            loop {
                let a: Vec<f64> = spec.action_low.iter().zip(&spec.action_high).map(|(&l, &h)| rng.random_range(l..=h)).collect();
                let out = env.step(&a).unwrap();
                total += out.reward;
                if out.terminal || out.truncated {
                    break total;
                }
            }
        })
        .collect();
    let (mean, var) = mean_var(&returns);
    (mean, var.sqrt())
}

fn criterion_point_mass(first_log: &mut Option<String>) -> Outcome {
    let start = Instant::now();
    let (base_mean, base_sd) = random_baseline(200, 9_001);
    let threshold = base_mean + 3.0 * base_sd;
    println!("    info: random baseline {base_mean:.1} +- {base_sd:.1} over 200 episodes, threshold {threshold:.1}");
    let mut wins = 0;
    for seed in 0..5 {
        let t = Instant::now();
        let mut sink = MemorySink::default();
        run_training(&point_mass_config(seed), &mut sink).unwrap();
        let evals = sink.evals();
        let tail = &evals[evals.len().saturating_sub(10)..];
        let score = tail.iter().map(|e| e.eval_return_mean).sum::<f64>() / tail.len() as f64;
        let win = tail.len() == 10 && score > threshold;
        wins += usize::from(win);
        println!(
            "    info: seed {seed}: mean of final {} evals {score:.1} ({}), {:.0}s",
            tail.len(),
            if win { "beats threshold" } else { "below threshold" },
            t.elapsed().as_secs_f64()
        );
        if seed == 0 {
            *first_log = Some(sink.to_jsonl().unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: wins >= 4 && secs < 1800.0,
        summary: format!("{wins}/5 seeds beat baseline + 3 sd (need 4), {secs:.0}s (limit 1800s)"),
    }
}

fn criterion_determinism(first_log: Option<String>) -> Outcome {
    let first = first_log.unwrap_or_else(|| {
        let mut sink = MemorySink::default();
        run_training(&point_mass_config(0), &mut sink).unwrap();
        sink.to_jsonl().unwrap()
    });
    let mut sink = MemorySink::default();
    run_training(&point_mass_config(0), &mut sink).unwrap();
    let second = sink.to_jsonl().unwrap();
    Outcome {
        passed: first == second && !first.is_empty(),
        summary: format!(
            "seed 0 rerun: {} vs {} bytes, {}",
            first.len(),
            second.len(),
            if first == second { "byte-identical" } else { "logs differ" }
        ),
    }
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("SOFTGRAD_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut results = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!("criterion {n} ({name}): {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.summary);
            results.push(o.passed);
        }
    };
    run(1, "soft policy gradient vs finite differences", &mut criterion_gradient_check);
    run(2, "sampled backup unbiasedness and variance", &mut criterion_backup);
    run(3, "estimator consistency", &mut criterion_estimator);
    run(4, "network gradcheck", &mut criterion_network_gradcheck);
    run(5, "clip and Polyak algebra", &mut criterion_clip_polyak);
    run(6, "continuous-bandit learning", &mut criterion_bandit);
    let mut first_log = None;
    run(7, "point-mass-2d learning", &mut || criterion_point_mass(&mut first_log));
    run(8, "determinism", &mut || criterion_determinism(first_log.take()));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
