//! Part alignment: the graph-matching baseline and the attention aligners.

pub mod attention;
pub mod graphmatch;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use attention::{AttnConfig, CrossAttnAligner, Mhsa, SelfAttnAligner, TransformerBlock};
pub use graphmatch::{
    best_permutation, correlation, reorder_parts, similarity, CorrMatrix, CorrelationBank,
    MatchMode, Permutation,
};

/// Which mechanism turns the unordered part tokens into the unified local
/// representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlignmentVariant {
    /// Concatenate parts in proposal order.
    None,
    /// Re-order parts against the correlation bank, then concatenate.
    GraphMatch,
    SelfAttn { layers: usize },
    CrossAttn,
}

impl AlignmentVariant {
    pub fn uses_bank(&self) -> bool {
        matches!(self, AlignmentVariant::GraphMatch)
    }
}

impl fmt::Display for AlignmentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentVariant::None => f.write_str("none"),
            AlignmentVariant::GraphMatch => f.write_str("graphmatch"),
            AlignmentVariant::SelfAttn { layers } => write!(f, "attn{layers}"),
            AlignmentVariant::CrossAttn => f.write_str("crossattn"),
        }
    }
}

impl FromStr for AlignmentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" => Ok(AlignmentVariant::None),
            "graphmatch" => Ok(AlignmentVariant::GraphMatch),
            "crossattn" => Ok(AlignmentVariant::CrossAttn),
            other => other
                .strip_prefix("attn")
                .and_then(|n| n.parse().ok())
                .filter(|&layers| layers >= 1)
                .map(|layers| AlignmentVariant::SelfAttn { layers })
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown alignment '{other}' (expected none, graphmatch, attn1, attn3, crossattn)"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for AlignmentVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<AlignmentVariant> for String {
    fn from(v: AlignmentVariant) -> String {
        v.to_string()
    }
}
