//! Cell search spaces: candidate operations, cell topology, architecture
//! parameters, the weight-sharing network, and discretisation.

mod alpha;
mod genotype;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use alpha::{alpha_std_total, edge_softmax, Alpha, ALPHA_NORMAL_SOURCE, ALPHA_REDUCE_SOURCE};
pub use genotype::{discretize, skip_fraction, Genotype, NodeEdges};
pub use network::{alpha_grads, alpha_vars, AlphaVars, MixedOp, Network, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// Two-input cells with four intermediate nodes and eight candidates.
    Darts,
    /// Single-input cells with three nodes after the input and five candidates.
    Nb201,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Darts => "darts",
            SpaceKind::Nb201 => "nb201",
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "darts" => Ok(SpaceKind::Darts),
            "nb201" | "201" => Ok(SpaceKind::Nb201),
            _ => Err(Error::config("space", format!("unknown space `{s}` (expected darts or nb201)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "conv_1x1")]
    Conv1x1,
    #[serde(rename = "conv_3x3")]
    Conv3x3,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::Conv3x3 => "conv_3x3",
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(
            self,
            OpKind::None | OpKind::SkipConnect | OpKind::MaxPool3x3 | OpKind::AvgPool3x3
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::config("op", format!("unknown operation `{s}`")))
    }
}

/// Ordered candidate list; α column `k` belongs to `ops[k]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSet {
    ops: Vec<OpKind>,
}

impl OperationSet {
    pub fn new(ops: Vec<OpKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::config("ops", "empty operation set"));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::config("ops", format!("duplicate operation {op}")));
            }
        }
        Ok(Self { ops })
    }

    pub fn for_space(space: SpaceKind) -> Self {
        let ops = match space {
            SpaceKind::Darts => OpKind::ALL[..8].to_vec(),
            SpaceKind::Nb201 => vec![
                OpKind::None,
                OpKind::SkipConnect,
                OpKind::Conv1x1,
                OpKind::Conv3x3,
                OpKind::AvgPool3x3,
            ],
        };
        Self { ops }
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: OpKind) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }
}

/// DAG shape of a cell: `inputs` input states followed by `nodes`
/// computed nodes, each fed by every earlier state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub inputs: usize,
    pub nodes: usize,
}

impl CellTopology {
    pub fn for_space(space: SpaceKind, nodes: usize) -> Self {
        match space {
            SpaceKind::Darts => Self { inputs: 2, nodes },
            SpaceKind::Nb201 => Self { inputs: 1, nodes },
        }
    }

    pub fn num_edges(&self) -> usize {
        (0..self.nodes).map(|j| self.inputs + j).sum()
    }

    /// Index of the edge from state `src` into node `node`.
    pub fn edge_index(&self, node: usize, src: usize) -> usize {
        debug_assert!(src < self.inputs + node);
        (0..node).map(|j| self.inputs + j).sum::<usize>() + src
    }

    /// `(node, src, edge)` triples in edge order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.nodes).flat_map(move |j| (0..self.inputs + j).map(move |s| (j, s, self.edge_index(j, s))))
    }
}
