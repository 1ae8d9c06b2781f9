use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ops::OpKind;
use super::topology::{CellTopology, SpaceId};
use crate::error::{Error, Result};

/// One kept edge of a discrete cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize, OpKind)", into = "(usize, usize, OpKind)")]
pub struct Gene {
    pub src: usize,
    pub dst: usize,
    pub op: OpKind,
}

impl From<(usize, usize, OpKind)> for Gene {
    fn from((src, dst, op): (usize, usize, OpKind)) -> Self {
        Gene { src, dst, op }
    }
}

impl From<Gene> for (usize, usize, OpKind) {
    fn from(g: Gene) -> Self {
        (g.src, g.dst, g.op)
    }
}

/// Discrete architecture. `reduce` is empty for single-cell-type spaces.
///
/// Serialized as `{space, normal: [[src, dst, op], ...], reduce: [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub space: SpaceId,
    pub normal: Vec<Gene>,
    #[serde(default)]
    pub reduce: Vec<Gene>,
}

impl Genotype {
    /// Stable string key, e.g. `micro|0-1:conv_3x3,1-2:skip_connect|`.
    pub fn canonical(&self) -> String {
        let part = |genes: &[Gene]| {
            let mut sorted = genes.to_vec();
            sorted.sort();
            sorted.iter().map(|g| format!("{}-{}:{}", g.src, g.dst, g.op)).collect::<Vec<_>>().join(",")
        };
        format!("{}|{}|{}", self.space, part(&self.normal), part(&self.reduce))
    }

    /// Checks the genotype against the cell topologies it claims to describe.
    pub fn validate(&self, normal: &CellTopology, reduce: Option<&CellTopology>) -> Result<()> {
        if self.space != normal.space {
            return Err(Error::contract(format!("genotype space {} vs topology {}", self.space, normal.space)));
        }
        validate_cell(&self.normal, normal, "normal")?;
        match reduce {
            Some(t) => validate_cell(&self.reduce, t, "reduce"),
            None if self.reduce.is_empty() => Ok(()),
            None => Err(Error::contract("reduce genes given for a space without reduction cells")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn validate_cell(genes: &[Gene], topo: &CellTopology, which: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in genes {
        if !topo.searchable_edges().any(|(_, e)| e.src == g.src && e.dst == g.dst) {
            return Err(Error::contract(format!("{which} gene ({}, {}) is not a searchable edge", g.src, g.dst)));
        }
        if !topo.ops.contains(&g.op) {
            return Err(Error::Catalog(format!("{} in {which} cell of the {} space", g.op, topo.space)));
        }
        if !seen.insert((g.src, g.dst)) {
            return Err(Error::contract(format!("{which} gene ({}, {}) repeated", g.src, g.dst)));
        }
    }
    if topo.keeps_top2() {
        for node in topo.intermediate_nodes() {
            let n = genes.iter().filter(|g| g.dst == node).count();
            if n != 2 {
                return Err(Error::contract(format!("{which} node {node} keeps {n} edges, expected 2")));
            }
        }
    } else if seen.len() != topo.num_searchable() {
        return Err(Error::contract(format!(
            "{which} cell lists {} edges, topology has {}",
            seen.len(),
            topo.num_searchable()
        )));
    }
    Ok(())
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layout() {
        let g = Genotype {
            space: SpaceId::Reduced,
            normal: vec![Gene { src: 0, dst: 1, op: OpKind::Conv3x3 }],
            reduce: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["space"], "reduced");
        assert_eq!(v["normal"][0], serde_json::json!([0, 1, "conv_3x3"]));
        assert_eq!(Genotype::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    #[test]
    fn validation() {
        let topo = CellTopology::micro_default();
        let genes = |op| {
            [(0, 1), (1, 2), (2, 3)].iter().map(|&(s, d)| Gene { src: s, dst: d, op }).collect::<Vec<_>>()
        };
        let good = Genotype { space: SpaceId::Micro, normal: genes(OpKind::Conv3x3), reduce: vec![] };
        good.validate(&topo, None).unwrap();
        let bad_op = Genotype { normal: genes(OpKind::SepConv5x5), ..good.clone() };
        assert!(matches!(bad_op.validate(&topo, None), Err(Error::Catalog(_))));
        let short = Genotype { normal: genes(OpKind::Conv3x3)[..2].to_vec(), ..good.clone() };
        assert!(short.validate(&topo, None).is_err());
    }
}
