//! Relational context operators and the context pooling (CP) block.

pub mod attention;
mod block;
mod heatmap;

pub use attention::{
    attention_quadratic, from_tokens, global_linearized, label_prototypes, local_context, spatial_softmax,
    to_tokens,
};
pub use block::{Candidate, CpBlock, CpInputs, CpMode, QkvProjection};
pub use heatmap::{attention_heatmap, export_attention_map, spread_regions};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five CP-block candidates. The declaration order is the search index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextType {
    Global,
    Local,
    TLabel,
    SLabel,
    None,
}

impl ContextType {
    pub const COUNT: usize = 5;
    pub const ALL: [ContextType; 5] = [
        ContextType::Global,
        ContextType::Local,
        ContextType::TLabel,
        ContextType::SLabel,
        ContextType::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextType::Global => "global",
            ContextType::Local => "local",
            ContextType::TLabel => "t_label",
            ContextType::SLabel => "s_label",
            ContextType::None => "none",
        }
    }

    pub fn is_label(self) -> bool {
        matches!(self, ContextType::TLabel | ContextType::SLabel)
    }
}

impl fmt::Display for ContextType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown context type {s:?}"))
    }
}
