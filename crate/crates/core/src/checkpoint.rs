//! Versioned JSON checkpoints.
//!
//! Every record is wrapped in `{"format": <kind>, "version": <n>, "body": ...}`.
//! Floats are written with the shortest decimal that parses back to the same
//! bits, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

pub trait Checkpoint: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Structural checks run after decoding.
    fn validate(&self) -> Result<()>;

    fn to_checkpoint_string(&self) -> Result<String> {
        let env = Envelope {
            format: Self::KIND.to_string(),
            version: FORMAT_VERSION,
            body: self,
        };
        Ok(serde_json::to_string(&env)?)
    }

    fn from_checkpoint_str(text: &str) -> Result<Self> {
        let env: Envelope<Self> = serde_json::from_str(text)?;
        if env.format != Self::KIND {
            return Err(Error::Config(format!(
                "checkpoint holds a `{}`, expected `{}`",
                env.format,
                Self::KIND
            )));
        }
        if env.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                env.version
            )));
        }
        env.body.validate()?;
        Ok(env.body)
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

impl Checkpoint for Mlp {
    const KIND: &'static str = "mlp";

    fn validate(&self) -> Result<()> {
        Mlp::validate(self)
    }
}
