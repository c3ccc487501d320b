//! Small deterministic control environments.
//!
//! All dynamics are pure functions of `(state, action)`; randomness only
//! enters through `reset`, which draws from the environment's own seeded
//! generator. Actions are clipped to the declared bounds before the dynamics
//! see them.
//!
//! | name                | state                  | action        | horizon |
//! |---------------------|------------------------|---------------|---------|
//! | `point-mass-2d`     | `(x, y, vx, vy)`       | `[-1, 1]^2`   | 200     |
//! | `pendulum-swingup`  | `(cos phi, sin phi, phi_dot)` | `[-2, 2]` | 200 |
//! | `continuous-bandit` | `(1)`                  | `[-1, 1]`     | 1       |
//!
//! Point mass: `v += a * dt`, `p += v * dt` with `dt = 0.1`; positions are
//! clamped to `[-2, 2]` (the velocity component hitting a wall is zeroed) and
//! velocities to `[-2, 2]`. Start `(1, 1)` at rest, goal at the origin.
//! Reward `-|p - goal|^2 - 0.01 |a|^2`.
//!
//! Pendulum: `g = 10`, `m = l = 1`, `dt = 0.05`, angular speed clamped to
//! `[-8, 8]`; `phi_dot += (3g/(2l) sin phi + 3/(m l^2) u) dt`, then
//! `phi += phi_dot dt`. `phi = 0` is upright. Reward
//! `-(angle^2 + 0.1 phi_dot^2 + 0.001 u^2)` on the pre-step state, with the
//! angle wrapped to `[-pi, pi)`. Starts uniform in `phi in [-pi, pi]`,
//! `phi_dot in [-1, 1]`.
//!
//! Bandit: a single state; reward `-a^2`; every pull ends the episode.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// The episode ended for real (no bootstrapping past it).
    pub terminal: bool,
    /// The step budget ran out.
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Pure dynamics on an already-clipped action: `(next_state, reward, terminal)`.
    fn dynamics(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool);

    /// Draws a start state from the environment's own generator.
    fn initial_state(&mut self) -> Vec<f64>;

    /// Episode bookkeeping shared by every environment.
    fn episode(&mut self) -> &mut EpisodeState;

    fn reset(&mut self) -> Vec<f64> {
        let s = self.initial_state();
        let ep = self.episode();
        ep.state = Some(s.clone());
        ep.steps = 0;
        ep.done = false;
        s
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let spec = self.spec().clone();
        if action.len() != spec.action_dim {
            return shape_err(format!(
                "{} takes {} action values, got {}",
                spec.name,
                spec.action_dim,
                action.len()
            ));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite action".into()));
        }
        let state = {
            let ep = self.episode();
            match (&ep.state, ep.done) {
                (None, _) => return Err(Error::Protocol("step called before reset".into())),
                (Some(_), true) => return Err(Error::Protocol("step called after the episode ended".into())),
                (Some(s), false) => s.clone(),
            }
        };
        let clipped = spec.clip_action(action);
        let (next, reward, terminal) = self.dynamics(&state, &clipped);
        let ep = self.episode();
        ep.steps += 1;
        let truncated = !terminal && ep.steps >= spec.max_episode_steps;
        ep.done = terminal || truncated;
        ep.state = Some(next.clone());
        Ok(StepOutcome {
            next_state: next,
            reward,
            terminal,
            truncated,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeState {
    state: Option<Vec<f64>>,
    steps: usize,
    done: bool,
}

pub const ENV_NAMES: [&str; 3] = ["point-mass-2d", "pendulum-swingup", "continuous-bandit"];

pub fn make_env(name: &str, seed: u64) -> Result<Box<dyn Env>> {
    match name {
        "point-mass-2d" => Ok(Box::new(PointMass::new(seed))),
        "pendulum-swingup" => Ok(Box::new(Pendulum::new(seed))),
        "continuous-bandit" => Ok(Box::new(Bandit::new(seed))),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (known: {})",
            ENV_NAMES.join(", ")
        ))),
    }
}

pub struct PointMass {
    spec: EnvSpec,
    episode: EpisodeState,
}

impl PointMass {
    pub const DT: f64 = 0.1;
    pub const BOUND: f64 = 2.0;
    pub const MAX_SPEED: f64 = 2.0;
    pub const START: [f64; 2] = [1.0, 1.0];
    pub const GOAL: [f64; 2] = [0.0, 0.0];

    pub fn new(_seed: u64) -> Self {
        Self {
            spec: EnvSpec {
                name: "point-mass-2d",
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps: 200,
                // farthest corner from the goal, plus the action penalty
                reward_range: (-Self::far_corner() - 0.02, 0.0),
            },
            episode: EpisodeState::default(),
        }
    }

    fn far_corner() -> f64 {
        let dx = Self::BOUND + Self::GOAL[0].abs();
        let dy = Self::BOUND + Self::GOAL[1].abs();
        dx * dx + dy * dy
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        let mut next = s.to_vec();
        for d in 0..2 {
            let mut v = (s[2 + d] + a[d] * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            let mut p = s[d] + v * Self::DT;
            if p.abs() > Self::BOUND {
                p = p.clamp(-Self::BOUND, Self::BOUND);
                v = 0.0;
            }
            next[d] = p;
            next[2 + d] = v;
        }
        let reward = -((next[0] - Self::GOAL[0]).powi(2) + (next[1] - Self::GOAL[1]).powi(2))
            - 0.01 * (a[0] * a[0] + a[1] * a[1]);
        (next, reward, false)
    }

    fn initial_state(&mut self) -> Vec<f64> {
        vec![Self::START[0], Self::START[1], 0.0, 0.0]
    }

    fn episode(&mut self) -> &mut EpisodeState {
        &mut self.episode
    }
}

pub struct Pendulum {
    spec: EnvSpec,
    episode: EpisodeState,
    rng: ChaCha8Rng,
}

impl Pendulum {
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;

    pub fn new(seed: u64) -> Self {
        let worst = PI * PI + 0.1 * Self::MAX_SPEED * Self::MAX_SPEED + 0.001 * Self::MAX_TORQUE * Self::MAX_TORQUE;
        Self {
            spec: EnvSpec {
                name: "pendulum-swingup",
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-Self::MAX_TORQUE],
                action_high: vec![Self::MAX_TORQUE],
                max_episode_steps: 200,
                reward_range: (-worst, 0.0),
            },
            episode: EpisodeState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn observe(phi: f64, phi_dot: f64) -> Vec<f64> {
        vec![phi.cos(), phi.sin(), phi_dot]
    }
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        let phi = s[1].atan2(s[0]);
        let phi_dot = s[2];
        let u = a[0];
        let angle = wrap_angle(phi);
        let reward = -(angle * angle + 0.1 * phi_dot * phi_dot + 0.001 * u * u);
        let accel = 3.0 * Self::G / (2.0 * Self::LENGTH) * phi.sin() + 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u;
        let new_dot = (phi_dot + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        let new_phi = phi + new_dot * Self::DT;
        (Self::observe(new_phi, new_dot), reward, false)
    }

    fn initial_state(&mut self) -> Vec<f64> {
        let phi = self.rng.random_range(-PI..=PI);
        let phi_dot = self.rng.random_range(-1.0..=1.0);
        Self::observe(phi, phi_dot)
    }

    fn episode(&mut self) -> &mut EpisodeState {
        &mut self.episode
    }
}

pub struct Bandit {
    spec: EnvSpec,
    episode: EpisodeState,
}

impl Bandit {
    pub fn new(_seed: u64) -> Self {
        Self {
            spec: EnvSpec {
                name: "continuous-bandit",
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 1,
                reward_range: (-1.0, 0.0),
            },
            episode: EpisodeState::default(),
        }
    }
}

impl Env for Bandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        (s.to_vec(), -a[0] * a[0], true)
    }

    fn initial_state(&mut self) -> Vec<f64> {
        vec![1.0]
    }

    fn episode(&mut self) -> &mut EpisodeState {
        &mut self.episode
    }
}
