// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where on the residual stream a node sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `x^0`, layer 0 only.
    Embed,
    /// `x^{lA}`.
    AfterAttn,
    /// `x^l`.
    AfterLayer,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::AfterAttn => "after_attn",
            Stage::AfterLayer => "after_layer",
        }
    }
}

/// A node of the information flow graph. Ordered by layer, then stage,
/// then position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodeId {
    pub layer: usize,
    pub stage: Stage,
    pub pos: usize,
}

impl NodeId {
    pub fn embed(pos: usize) -> Self {
        Self {
            layer: 0,
            stage: Stage::Embed,
            pos,
        }
    }

    pub fn after_attn(pos: usize, layer: usize) -> Self {
        Self {
            layer,
            stage: Stage::AfterAttn,
            pos,
        }
    }

    pub fn after_layer(pos: usize, layer: usize) -> Self {
        Self {
            layer,
            stage: Stage::AfterLayer,
            pos,
        }
    }

    /// Top of the residual stream at `pos`; the embedding when the model
    /// has no layers.
    pub fn top(pos: usize, n_layers: usize) -> Self {
        if n_layers == 0 {
            Self::embed(pos)
        } else {
            Self::after_layer(pos, n_layers)
        }
    }

    /// Output of layer `layer` at `pos` (`x^layer`), the embedding for 0.
    pub fn residual(pos: usize, layer: usize) -> Self {
        Self::top(pos, layer)
    }

    /// Checks the node against a model depth and sequence length.
    pub fn validate(&self, n_layers: usize, seq_len: usize) -> Result<()> {
        let ok_layer = match self.stage {
            Stage::Embed => self.layer == 0,
            _ => (1..=n_layers).contains(&self.layer),
        };
        if !ok_layer || self.pos >= seq_len {
            return Err(Error::InvalidNode(format!(
                "{self} (model has {n_layers} layers, sequence has {seq_len} tokens)"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}.l{}.{}", self.pos, self.layer, self.stage.as_str())
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidNode(format!("cannot parse node id {s:?}"));
        let mut parts = s.splitn(3, '.');
        let (Some(p), Some(l), Some(stage)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let pos = p
            .strip_prefix('p')
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let layer = l
            .strip_prefix('l')
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let stage = match stage {
            "embed" => Stage::Embed,
            "after_attn" => Stage::AfterAttn,
            "after_layer" => Stage::AfterLayer,
            _ => return Err(bad()),
        };
        if stage == Stage::Embed && layer != 0 || stage != Stage::Embed && layer == 0 {
            return Err(bad());
        }
        Ok(Self { layer, stage, pos })
    }
}

impl From<NodeId> for String {
    fn from(n: NodeId) -> Self {
        n.to_string()
    }
}

impl TryFrom<String> for NodeId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
