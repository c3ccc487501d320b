//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::DEFAULT_STD_FLOOR;
use crate::replay::DEFAULT_CAPACITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub env: String,
    pub gamma: f64,
    pub tau: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub action_samples: usize,
    pub train_steps_per_env_step: usize,
    pub polyak_alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub reward_scale: f64,
    pub buffer_capacity: usize,
    pub warmup: usize,
    pub total_env_steps: usize,
    pub seed: u64,
    /// Hidden widths shared by actor trunk and critic.
    pub hidden_sizes: Vec<usize>,
    pub std_floor: f64,
    /// Env steps between evaluation rounds; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Env steps between train-metric records.
    pub log_interval: usize,
    /// Env steps between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_interval: usize,
    /// Replace the sampled `-log pi` in the backup by the closed-form entropy.
    pub analytic_entropy_backup: bool,
    pub export_transitions: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            env: "point-mass-2d".into(),
            gamma: 0.99,
            tau: 1.0,
            clip_norm: 5.0,
            batch_size: 100,
            action_samples: 64,
            train_steps_per_env_step: 4,
            polyak_alpha: 0.01,
            actor_lr: 5e-5,
            critic_lr: 5e-4,
            reward_scale: 5.0,
            buffer_capacity: DEFAULT_CAPACITY,
            warmup: 1000,
            total_env_steps: 3_000_000,
            seed: 0,
            hidden_sizes: vec![512, 512],
            std_floor: DEFAULT_STD_FLOOR,
            eval_interval: 5000,
            eval_episodes: 5,
            log_interval: 1000,
            checkpoint_interval: 0,
            analytic_entropy_backup: false,
            export_transitions: false,
        }
    }
}

/// Every key accepted in a config file, in output order.
pub const CONFIG_KEYS: [&str; 23] = [
    "env",
    "gamma",
    "tau",
    "clip_norm",
    "batch_size",
    "action_samples",
    "train_steps_per_env_step",
    "polyak_alpha",
    "actor_lr",
    "critic_lr",
    "reward_scale",
    "buffer_capacity",
    "warmup",
    "total_env_steps",
    "seed",
    "hidden_sizes",
    "std_floor",
    "eval_interval",
    "eval_episodes",
    "log_interval",
    "checkpoint_interval",
    "analytic_entropy_backup",
    "export_transitions",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            bad.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            bad.push(format!("tau must be non-negative, got {}", self.tau));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            bad.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.polyak_alpha) {
            bad.push(format!("polyak_alpha must lie in [0, 1], got {}", self.polyak_alpha));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                bad.push(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            bad.push(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("action_samples", self.action_samples),
            ("train_steps_per_env_step", self.train_steps_per_env_step),
            ("eval_episodes", self.eval_episodes),
            ("log_interval", self.log_interval),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.buffer_capacity < self.batch_size {
            bad.push(format!(
                "buffer_capacity {} cannot hold a minibatch of {}",
                self.buffer_capacity, self.batch_size
            ));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            bad.push("hidden_sizes must list at least one positive width".into());
        }
        if !(self.std_floor > 0.0 && self.std_floor < 1.0) {
            bad.push(format!("std_floor must lie in (0, 1), got {}", self.std_floor));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "env" => self.env = value.to_string(),
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "action_samples" => self.action_samples = parse(key, value)?,
            "train_steps_per_env_step" => self.train_steps_per_env_step = parse(key, value)?,
            "polyak_alpha" => self.polyak_alpha = parse(key, value)?,
            "actor_lr" => self.actor_lr = parse(key, value)?,
            "critic_lr" => self.critic_lr = parse(key, value)?,
            "reward_scale" => self.reward_scale = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "total_env_steps" => self.total_env_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "hidden_sizes" => {
                self.hidden_sizes = value
                    .split(',')
                    .map(|w| parse::<usize>(key, w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "std_floor" => self.std_floor = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "analytic_entropy_backup" => self.analytic_entropy_backup = parse(key, value)?,
            "export_transitions" => self.export_transitions = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` pairs in order. Every offending pair is reported
    /// in one error, and the config is left untouched if any pair fails.
    pub fn apply<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(&mut self, pairs: I) -> Result<()> {
        let mut next = self.clone();
        let problems: Vec<String> = pairs
            .into_iter()
            .filter_map(|(k, v)| next.set(k.trim(), v.trim()).err())
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        *self = next;
        Ok(())
    }

    /// Parses the flat text format: one `key = value` per line, `#` comments.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        let mut malformed = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k, v)),
                None => malformed.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }
        let applied = self.apply(pairs.iter().copied());
        match (applied, malformed.is_empty()) {
            (Ok(()), true) => Ok(()),
            (Ok(()), false) => Err(Error::Config(malformed.join("; "))),
            (Err(Error::Config(m)), _) => {
                malformed.push(m);
                Err(Error::Config(malformed.join("; ")))
            }
            (Err(e), _) => Err(e),
        }
    }

    /// Command-line style `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut pairs = Vec::new();
        let mut malformed = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some(p) => pairs.push(p),
                None => malformed.push(format!("override `{o}` is not key=value")),
            }
        }
        if !malformed.is_empty() {
            if let Err(Error::Config(m)) = self.clone().apply(pairs.iter().copied()) {
                malformed.push(m);
            }
            return Err(Error::Config(malformed.join("; ")));
        }
        self.apply(pairs)
    }

    pub fn to_kv_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let v = &json[key];
            let text = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key} = {text}");
        }
        out
    }
}
