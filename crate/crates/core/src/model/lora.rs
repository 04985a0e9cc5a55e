use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::ParamId;
use crate::error::{Error, Result};

/// Projection weights inside a layer block, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::Q,
        Target::K,
        Target::V,
        Target::O,
        Target::Gate,
        Target::Up,
        Target::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }

    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().strip_suffix("_proj").unwrap_or(s.trim());
        Target::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| Error::param(format!("unknown LoRA target {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<Target>,
}

/// The low-rank pair added to one projection: `W + A·B`, with `B` starting at
/// zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterHandle {
    pub layer: usize,
    pub target: Target,
    pub a: ParamId,
    pub b: ParamId,
}
