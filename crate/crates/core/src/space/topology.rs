use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ops::OpKind;
use crate::error::{Error, Result};

/// Identifier of a search space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceId {
    /// Bi-chain cell: 2 inputs, 4 intermediate nodes, 14 edges, 8 ops.
    Darts,
    /// 4-node fixed topology, 6 edges, 5 ops.
    Nb201,
    /// NB201 topology with the three-op candidate set.
    Reduced,
    /// Reduced ops on 3 searchable edges of the NB201 topology; the rest fixed.
    Micro,
}

impl SpaceId {
    pub fn name(self) -> &'static str {
        match self {
            SpaceId::Darts => "darts",
            SpaceId::Nb201 => "nb201",
            SpaceId::Reduced => "reduced",
            SpaceId::Micro => "micro",
        }
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [SpaceId::Darts, SpaceId::Nb201, SpaceId::Reduced, SpaceId::Micro]
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown search space `{s}`")))
    }
}

/// Candidate order of the DARTS space, as in its reference implementation.
pub const DARTS_OPS: [OpKind; 8] = [
    OpKind::None,
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SkipConnect,
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
];

/// Candidate order of the NB201 space; `skip_connect` sits at index 1.
pub const NB201_OPS: [OpKind; 5] =
    [OpKind::None, OpKind::SkipConnect, OpKind::Conv1x1, OpKind::Conv3x3, OpKind::AvgPool3x3];

/// The three-op space: convolution, skip, average pooling.
pub const REDUCED_OPS: [OpKind; 3] = [OpKind::Conv3x3, OpKind::SkipConnect, OpKind::AvgPool3x3];

/// What an edge computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRole {
    /// Mixed over the candidate list; owns α row `row`.
    Searchable { row: usize },
    /// Always the given op.
    Fixed(OpKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub role: EdgeRole,
}

/// DAG of a cell. Nodes `0..num_inputs` are inputs; the rest are
/// intermediate. DARTS cells concatenate all intermediate nodes into the
/// output, NB201-style cells emit the last node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTopology {
    pub space: SpaceId,
    pub num_nodes: usize,
    pub num_inputs: usize,
    pub edges: Vec<Edge>,
    pub ops: Vec<OpKind>,
    pub reduction: bool,
}

impl CellTopology {
    pub fn darts(reduction: bool) -> Self {
        let mut edges = Vec::new();
        for dst in 2..6 {
            for src in 0..dst {
                let row = edges.len();
                edges.push(Edge { src, dst, role: EdgeRole::Searchable { row } });
            }
        }
        CellTopology { space: SpaceId::Darts, num_nodes: 6, num_inputs: 2, edges, ops: DARTS_OPS.to_vec(), reduction }
    }

    fn nb201_edges() -> Vec<(usize, usize)> {
        (1..4).flat_map(|dst| (0..dst).map(move |src| (src, dst))).collect()
    }

    pub fn nb201() -> Self {
        Self::nb201_with(SpaceId::Nb201, NB201_OPS.to_vec())
    }

    pub fn reduced() -> Self {
        Self::nb201_with(SpaceId::Reduced, REDUCED_OPS.to_vec())
    }

    fn nb201_with(space: SpaceId, ops: Vec<OpKind>) -> Self {
        let edges = Self::nb201_edges()
            .into_iter()
            .enumerate()
            .map(|(row, (src, dst))| Edge { src, dst, role: EdgeRole::Searchable { row } })
            .collect();
        CellTopology { space, num_nodes: 4, num_inputs: 1, edges, ops, reduction: false }
    }

    /// NB201 topology where only `searchable` edges are mixed; the others
    /// run `fixed`. Searchable edges get α rows in topology order.
    pub fn micro(ops: Vec<OpKind>, searchable: &[(usize, usize)], fixed: OpKind) -> Result<Self> {
        let all = Self::nb201_edges();
        if let Some(bad) = searchable.iter().find(|e| !all.contains(e)) {
            return Err(Error::contract(format!("edge {bad:?} is not in the 4-node topology")));
        }
        if ops.is_empty() {
            return Err(Error::contract("micro space needs at least one candidate op"));
        }
        let mut row = 0;
        let edges = all
            .into_iter()
            .map(|(src, dst)| {
                let role = if searchable.contains(&(src, dst)) {
                    row += 1;
                    EdgeRole::Searchable { row: row - 1 }
                } else {
                    EdgeRole::Fixed(fixed)
                };
                Edge { src, dst, role }
            })
            .collect();
        Ok(CellTopology { space: SpaceId::Micro, num_nodes: 4, num_inputs: 1, edges, ops, reduction: false })
    }

    /// Default micro space: reduced ops on the chain `0-1-2-3`, shortcuts fixed to skip.
    pub fn micro_default() -> Self {
        Self::micro(REDUCED_OPS.to_vec(), &[(0, 1), (1, 2), (2, 3)], OpKind::SkipConnect)
            .expect("static micro definition is valid")
    }

    pub fn for_space(space: SpaceId, reduction: bool) -> Self {
        match space {
            SpaceId::Darts => Self::darts(reduction),
            SpaceId::Nb201 => Self::nb201(),
            SpaceId::Reduced => Self::reduced(),
            SpaceId::Micro => Self::micro_default(),
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Number of α rows.
    pub fn num_searchable(&self) -> usize {
        self.edges.iter().filter(|e| matches!(e.role, EdgeRole::Searchable { .. })).count()
    }

    pub fn searchable_edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().filter_map(|e| match e.role {
            EdgeRole::Searchable { row } => Some((row, e)),
            EdgeRole::Fixed(_) => None,
        })
    }

    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        self.num_inputs..self.num_nodes
    }

    /// Searchable edge rows entering `node`, in topology order.
    pub fn incoming_rows(&self, node: usize) -> Vec<usize> {
        self.searchable_edges().filter(|(_, e)| e.dst == node).map(|(r, _)| r).collect()
    }

    pub fn op_index(&self, op: OpKind) -> Result<usize> {
        self.ops
            .iter()
            .position(|&o| o == op)
            .ok_or_else(|| Error::Catalog(format!("{op} is not a candidate in the {} space", self.space)))
    }

    /// True when derivation keeps only the top-2 incoming edges per node.
    pub fn keeps_top2(&self) -> bool {
        self.space == SpaceId::Darts
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if e.src >= e.dst || e.dst >= self.num_nodes || e.dst < self.num_inputs {
                return Err(Error::contract(format!("edge ({}, {}) breaks the DAG order", e.src, e.dst)));
            }
        }
        Ok(())
    }
}
