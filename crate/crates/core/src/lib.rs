//! Maximum-entropy off-policy actor-critic with exact tabular references.

pub mod agent;
pub mod checkpoint;
pub mod critic;
pub mod env;
pub mod error;
pub mod nn;
pub mod policy;
pub mod replay;
pub mod tabular;
pub mod verify;

pub use agent::{actor_gradient, clipped_actor_update, Agent, AgentConfig, StochasticActor};
pub use checkpoint::Checkpoint;
pub use critic::{sampled_backup, ActionValue, BackupBatch, SoftQ};
pub use env::{make_env, Env, EnvSpec, StepOutcome};
pub use error::{Error, Result};
pub use nn::{clip_by_global_norm, global_norm, polyak_update, Activation, AdamConfig, Direction, Gradient, Mlp};
pub use policy::{ActionSample, GaussianPolicy, PolicyGradient};
pub use replay::{ReplayBuffer, Transition};
