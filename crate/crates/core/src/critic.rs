//! Soft Q-function approximator, its target copy, and the sampled soft
//! Bellman backup used to regress it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{polyak_update, Activation, AdamConfig, Direction, Gradient, Mlp};
use crate::policy::{ActionSample, FlatSamples};

/// Anything that scores state-action pairs.
pub trait ActionValue<S, A> {
    fn values(&self, pairs: &[(&S, &A)]) -> Result<Vec<f64>>;
}

/// One backup problem per transition: reward, next state, terminal flag, and
/// `M >= 1` next actions drawn from the target policy with their log-densities.
#[derive(Debug, Clone)]
pub struct BackupBatch<S = Vec<f64>, A = Vec<f64>> {
    pub rewards: Vec<f64>,
    pub next_states: Vec<S>,
    pub terminal: Vec<bool>,
    pub next_actions: Vec<Vec<ActionSample<A>>>,
    /// When set, the closed-form next-state entropy replaces the sampled
    /// `-log pi` term.
    pub analytic_entropy: Option<Vec<f64>>,
}

impl<S, A> BackupBatch<S, A> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.rewards.len();
        if self.next_states.len() != n || self.terminal.len() != n || self.next_actions.len() != n {
            return shape_err("backup batch columns have different lengths");
        }
        if let Some(h) = &self.analytic_entropy {
            if h.len() != n {
                return shape_err("analytic entropy column has the wrong length");
            }
        }
        if let Some(i) = self.next_actions.iter().position(Vec::is_empty) {
            return Err(Error::Precondition(format!("transition {i} has no sampled next actions")));
        }
        Ok(())
    }
}

/// `y_i = r_i + gamma/M * sum_j [Q(s'_i, a_ij) - tau * log pi(a_ij | s'_i)]`,
/// or `y_i = r_i` at a true terminal.
pub fn sampled_backup<S, A, Q: ActionValue<S, A> + ?Sized>(
    target_q: &Q,
    batch: &BackupBatch<S, A>,
    gamma: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount must lie in [0, 1), got {gamma}")));
    }
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("temperature must be non-negative, got {tau}")));
    }
    batch.check()?;
    for (i, draws) in batch.next_actions.iter().enumerate() {
        if let Some(j) = draws.iter().position(|d| !d.log_prob.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite log-prob for transition {i}, action {j}"
            )));
        }
    }

    let mut pairs = Vec::new();
    for (i, draws) in batch.next_actions.iter().enumerate() {
        if batch.terminal[i] || gamma == 0.0 {
            continue;
        }
        for d in draws {
            pairs.push((&batch.next_states[i], &d.action));
        }
    }
    let q = if pairs.is_empty() { Vec::new() } else { target_q.values(&pairs)? };

    let mut cursor = 0;
    let mut out = Vec::with_capacity(batch.len());
    let mut log_probs = Vec::new();
    for (i, draws) in batch.next_actions.iter().enumerate() {
        let entropy = batch.analytic_entropy.as_ref().map(|h| h[i]);
        if batch.terminal[i] || gamma == 0.0 {
            out.push(soft_target(batch.rewards[i], true, gamma, tau, &[], &[], entropy));
            continue;
        }
        let m = draws.len();
        log_probs.clear();
        log_probs.extend(draws.iter().map(|d| d.log_prob));
        out.push(soft_target(batch.rewards[i], false, gamma, tau, &q[cursor..cursor + m], &log_probs, entropy));
        cursor += m;
    }
    Ok(out)
}

/// One backup target from the target-network values and log-densities of
/// the sampled next actions. With `entropy` set, `tau * entropy` replaces
/// every `-tau * log pi` term.
pub fn soft_target(
    reward: f64,
    terminal: bool,
    gamma: f64,
    tau: f64,
    q: &[f64],
    log_probs: &[f64],
    entropy: Option<f64>,
) -> f64 {
    if terminal || gamma == 0.0 {
        return reward;
    }
    let mut acc = 0.0;
    for (&qv, &lp) in q.iter().zip(log_probs) {
        let bonus = match entropy {
            Some(h) => tau * h,
            None => -tau * lp,
        };
        acc += qv + bonus;
    }
    reward + gamma * acc / q.len() as f64
}

/// Online soft Q-network plus its slowly tracking target copy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftQ {
    state_dim: usize,
    action_dim: usize,
    online: Mlp,
    target: Mlp,
}

/// Borrowed view of one of the critic's networks as an [`ActionValue`].
#[derive(Clone, Copy)]
pub struct QView<'a> {
    net: &'a Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl<'a> QView<'a> {
    fn stack(&self, pairs: &[(&Vec<f64>, &Vec<f64>)]) -> Result<Vec<f64>> {
        let width = self.state_dim + self.action_dim;
        let mut input = Vec::with_capacity(pairs.len() * width);
        for (s, a) in pairs {
            if s.len() != self.state_dim || a.len() != self.action_dim {
                return shape_err(format!(
                    "critic expects ({}, {}) inputs, got ({}, {})",
                    self.state_dim,
                    self.action_dim,
                    s.len(),
                    a.len()
                ));
            }
            input.extend_from_slice(s);
            input.extend_from_slice(a);
        }
        Ok(input)
    }
}

impl ActionValue<Vec<f64>, Vec<f64>> for QView<'_> {
    fn values(&self, pairs: &[(&Vec<f64>, &Vec<f64>)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.stack(pairs)?;
        self.net.predict_batch(&input, pairs.len())
    }
}

impl SoftQ {
    /// ReLU hidden layers, scalar identity output; the target starts as an
    /// exact copy of the online network.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut spec: Vec<_> = hidden.iter().map(|&h| (h, Activation::Relu)).collect();
        spec.push((1, Activation::Identity));
        let online = Mlp::new(state_dim + action_dim, &spec, rng)?;
        Self::from_network(state_dim, action_dim, online)
    }

    pub fn from_network(state_dim: usize, action_dim: usize, online: Mlp) -> Result<Self> {
        let q = Self {
            state_dim,
            action_dim,
            target: online.clone(),
            online,
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        self.online.validate()?;
        self.target.validate()?;
        if self.online.input_dim() != self.state_dim + self.action_dim || self.online.output_dim() != 1 {
            return shape_err("critic network must map state+action to a scalar");
        }
        if !self.online.same_shape(&self.target) {
            return shape_err("critic target differs in shape from online network");
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn online_mut(&mut self) -> &mut Mlp {
        &mut self.online
    }

    pub fn view(&self, use_target: bool) -> QView<'_> {
        QView {
            net: if use_target { &self.target } else { &self.online },
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    pub fn q_value(&self, state: &[f64], action: &[f64], use_target: bool) -> Result<f64> {
        let s = state.to_vec();
        let a = action.to_vec();
        Ok(self.view(use_target).values(&[(&s, &a)])?[0])
    }

    /// Values of `(s_i, a_ij)` for every stored sample, `s_i` being row `i`
    /// of `states`.
    pub fn values_flat(&self, use_target: bool, states: &[f64], samples: &FlatSamples) -> Result<Vec<f64>> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        if states.len() != samples.rows * sd || samples.action_dim != ad {
            return shape_err("flat critic inputs disagree with the critic's dimensions");
        }
        let net = if use_target { &self.target } else { &self.online };
        net.predict_grouped(states, samples.rows, &samples.actions, samples.count)
    }

    /// Backup targets from the TARGET network.
    pub fn sampled_backup(&self, batch: &BackupBatch, gamma: f64, tau: f64) -> Result<Vec<f64>> {
        sampled_backup(&self.view(true), batch, gamma, tau)
    }

    /// Mean squared error against fixed targets and its gradient over the
    /// online parameters. Targets are constants.
    pub fn soft_loss(&self, states: &[Vec<f64>], actions: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Gradient)> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::Precondition("soft loss needs at least one sample".into()));
        }
        if states.len() != n || actions.len() != n {
            return shape_err("soft loss inputs have different lengths");
        }
        let pairs: Vec<_> = states.iter().zip(actions).collect();
        let input = self.view(false).stack(&pairs)?;
        let (q, tape) = self.online.forward_batch(&input, n)?;
        let residual: Vec<f64> = q.iter().zip(targets).map(|(q, y)| q - y).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n as f64;
        let cot: Vec<f64> = residual.iter().map(|r| 2.0 * r / n as f64).collect();
        let (grad, _) = self.online.backward(&tape, &cot)?;
        Ok((loss, grad))
    }

    /// Gradient-descent Adam step on the online network only.
    pub fn critic_update(&mut self, grad: &Gradient, adam: &AdamConfig) -> Result<()> {
        self.online.adam_step(grad, adam, Direction::Descend)
    }

    pub fn polyak_target(&mut self, alpha: f64) -> Result<()> {
        polyak_update(&mut self.target, &self.online, alpha)
    }
}

impl Checkpoint for SoftQ {
    const KIND: &'static str = "soft_q";

    fn validate(&self) -> Result<()> {
        SoftQ::validate(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ConstQ(f64);

    impl<S, A> ActionValue<S, A> for ConstQ {
        fn values(&self, pairs: &[(&S, &A)]) -> Result<Vec<f64>> {
            Ok(vec![self.0; pairs.len()])
        }
    }

    fn one(reward: f64, terminal: bool, log_probs: &[f64]) -> BackupBatch<usize, usize> {
        BackupBatch {
            rewards: vec![reward],
            next_states: vec![0],
            terminal: vec![terminal],
            next_actions: vec![log_probs
                .iter()
                .enumerate()
                .map(|(a, &lp)| ActionSample { action: a, log_prob: lp })
                .collect()],
            analytic_entropy: None,
        }
    }

    #[test]
    fn terminal_and_zero_discount_return_reward() {
        let q = ConstQ(100.0);
        assert_eq!(sampled_backup(&q, &one(2.0, true, &[-1.0]), 0.9, 1.0).unwrap(), vec![2.0]);
        assert_eq!(sampled_backup(&q, &one(3.0, false, &[-1.0]), 0.0, 1.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn symmetric_soft_fixed_point() {
        let fixed = (1.0 + 0.9 * 2f64.ln()) / 0.1;
        let ln_half = -(2f64.ln());
        let y = sampled_backup(&ConstQ(fixed), &one(1.0, false, &[ln_half, ln_half]), 0.9, 1.0).unwrap();
        assert!((y[0] - fixed).abs() < 1e-12);
        assert!((fixed - 16.238_32).abs() < 1e-5);
    }

    #[test]
    fn analytic_entropy_variant() {
        let mut b = one(1.0, false, &[-5.0]);
        b.analytic_entropy = Some(vec![0.25]);
        let y = sampled_backup(&ConstQ(2.0), &b, 0.5, 2.0).unwrap();
        assert!((y[0] - (1.0 + 0.5 * (2.0 + 0.5))).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs_rejected() {
        let q = ConstQ(0.0);
        assert!(matches!(sampled_backup(&q, &one(0.0, false, &[f64::NEG_INFINITY]), 0.9, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(sampled_backup(&q, &one(0.0, false, &[]), 0.9, 1.0), Err(Error::Precondition(_))));
        assert!(matches!(sampled_backup(&q, &one(0.0, false, &[0.0]), 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_critic_outputs_bias() {
        let net = Mlp::from_layers(vec![
            Dense::zeros(3, 4, Activation::Relu),
            Dense::from_parts(4, 1, Activation::Identity, vec![0.0; 4], vec![1.25]).unwrap(),
        ])
        .unwrap();
        let q = SoftQ::from_network(2, 1, net).unwrap();
        assert_eq!(q.q_value(&[3.0, -1.0], &[0.4], false).unwrap(), 1.25);
        assert_eq!(q.q_value(&[0.0, 9.0], &[-7.0], true).unwrap(), 1.25);
    }

    #[test]
    fn target_equals_online_after_full_polyak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = SoftQ::new(2, 1, &[8], &mut rng).unwrap();
        let (s, a) = ([0.3, -0.2], [0.7]);
        let (_, g) = q.soft_loss(&[s.to_vec()], &[a.to_vec()], &[5.0]).unwrap();
        q.critic_update(&g, &AdamConfig::with_lr(0.1)).unwrap();
        assert_ne!(q.q_value(&s, &a, false).unwrap(), q.q_value(&s, &a, true).unwrap());
        q.polyak_target(1.0).unwrap();
        assert_eq!(q.q_value(&s, &a, false).unwrap(), q.q_value(&s, &a, true).unwrap());
    }

    #[test]
    fn loss_by_hand_for_linear_critic() {
        let net = Mlp::from_layers(vec![Dense::from_parts(2, 1, Activation::Identity, vec![3.0, 0.0], vec![0.0]).unwrap()]).unwrap();
        let q = SoftQ::from_network(1, 1, net).unwrap();
        let (loss, g) = q.soft_loss(&[vec![1.0]], &[vec![0.0]], &[0.0]).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.layers[0].weight, vec![6.0, 0.0]);
        assert_eq!(g.layers[0].bias, vec![6.0]);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = SoftQ::new(2, 2, &[6, 6], &mut rng).unwrap();
        let states = vec![vec![0.1, 0.2], vec![-0.5, 0.9]];
        let actions = vec![vec![0.3, 0.0], vec![1.0, -1.0]];
        let y: Vec<f64> = states
            .iter()
            .zip(&actions)
            .map(|(s, a)| q.q_value(s, a, false).unwrap())
            .collect();
        let (loss, g) = q.soft_loss(&states, &actions, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_update_with_zero_gradient_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = SoftQ::new(1, 1, &[4], &mut rng).unwrap();
        let before = q.online().flatten();
        let g = Gradient::zeros_like(q.online());
        q.critic_update(&g, &AdamConfig::with_lr(5e-4)).unwrap();
        assert_eq!(q.online().flatten(), before);
        assert_eq!(q.target().flatten(), before);
    }

    #[test]
    fn checkpoint_bundles_online_and_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut q = SoftQ::new(2, 1, &[5], &mut rng).unwrap();
        let (_, g) = q.soft_loss(&[vec![0.0, 1.0]], &[vec![0.5]], &[1.0]).unwrap();
        q.critic_update(&g, &AdamConfig::default()).unwrap();
        let back = SoftQ::from_checkpoint_str(&q.to_checkpoint_string().unwrap()).unwrap();
        assert_eq!(back.online().flatten(), q.online().flatten());
        assert_eq!(back.target().flatten(), q.target().flatten());
        assert_eq!(back.online().adam_state(), q.online().adam_state());
    }
}
