//! Discretization of architecture weights into a genotype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed::{beta_of, AlphaTable, ArchParams};
use crate::space::{CellTopology, Gene, Genotype, OpKind};

/// How γ enters the selection value when edge weights are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// `softmax(α)_op · softmax(γ)_edge`.
    #[default]
    Softmax,
    /// `α_op · γ_edge` on the raw parameters.
    Raw,
}

/// Chosen op index and its selection value for one α row.
fn pick(table: &AlphaTable, topo: &CellTopology, row: usize, sel: Selection) -> (usize, f64) {
    let alpha = table.row(row);
    let gamma = table.gamma.iter().find_map(|g| {
        let pos = g.rows.iter().position(|&r| r == row)?;
        Some(match sel {
            Selection::Softmax => beta_of(g.weights.data())[pos],
            Selection::Raw => g.weights.data()[pos],
        })
    });
    let score: Vec<f64> = match (gamma, sel) {
        (None, Selection::Softmax) => beta_of(alpha),
        (None, Selection::Raw) => alpha.to_vec(),
        (Some(g), Selection::Softmax) => beta_of(alpha).into_iter().map(|b| b * g).collect(),
        (Some(g), Selection::Raw) => alpha.iter().map(|a| a * g).collect(),
    };
    let only_none = topo.ops.iter().all(|&o| o == OpKind::None);
    let mut best: Option<usize> = None;
    for (i, &s) in score.iter().enumerate() {
        if topo.ops[i] == OpKind::None && !only_none {
            continue;
        }
        if best.is_none_or(|b| s > score[b]) {
            best = Some(i);
        }
    }
    let b = best.unwrap_or(0);
    (b, score[b])
}

fn derive_cell(table: &AlphaTable, topo: &CellTopology, sel: Selection) -> Result<Vec<Gene>> {
    if table.num_edges() != topo.num_searchable() || table.num_ops() != topo.num_ops() {
        return Err(Error::dim(
            "derive",
            format!("α table {}x{} vs topology {}x{}", table.num_edges(), table.num_ops(), topo.num_searchable(), topo.num_ops()),
        ));
    }
    if table.alpha.data().iter().any(|a| !a.is_finite()) {
        return Err(Error::contract("derive needs finite α"));
    }
    let mut genes = Vec::new();
    for node in topo.intermediate_nodes() {
        let mut cands: Vec<(usize, Gene, f64)> = topo
            .searchable_edges()
            .filter(|(_, e)| e.dst == node)
            .map(|(row, e)| {
                let (op, value) = pick(table, topo, row, sel);
                (row, Gene { src: e.src, dst: e.dst, op: topo.ops[op] }, value)
            })
            .collect();
        if topo.keeps_top2() {
            // Stable sort keeps the lower row first on ties.
            cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
            cands.truncate(2);
            cands.sort_by_key(|c| c.0);
        }
        genes.extend(cands.into_iter().map(|c| c.1));
    }
    Ok(genes)
}

/// Per edge, the highest-scoring op other than `none`; DARTS cells then keep
/// the two incoming edges with the highest selection value per node. Ties go
/// to the lowest index.
pub fn derive(arch: &ArchParams, normal: &CellTopology, reduce: Option<&CellTopology>, sel: Selection) -> Result<Genotype> {
    let normal_genes = derive_cell(&arch.normal, normal, sel)?;
    let reduce_genes = match (&arch.reduce, reduce) {
        (Some(t), Some(topo)) => derive_cell(t, topo, sel)?,
        (None, None) => vec![],
        _ => return Err(Error::contract("reduce α and reduce topology must both be present or both absent")),
    };
    Ok(Genotype { space: normal.space, normal: normal_genes, reduce: reduce_genes })
}

/// Fraction of searchable edges (all tables) whose chosen op is `skip_connect`.
pub fn skip_fraction(arch: &ArchParams, normal: &CellTopology, reduce: Option<&CellTopology>) -> f64 {
    let mut total = 0usize;
    let mut skip = 0usize;
    for (table, topo) in std::iter::once((&arch.normal, normal)).chain(arch.reduce.as_ref().zip(reduce)) {
        for row in 0..table.num_edges() {
            total += 1;
            if topo.ops[pick(table, topo, row, Selection::Softmax).0] == OpKind::SkipConnect {
                skip += 1;
            }
        }
    }
    skip as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{SpaceId, DARTS_OPS};

    #[test]
    fn one_hot_alpha_is_recovered() {
        let topo = CellTopology::nb201();
        let mut arch = ArchParams::zeros(&topo, None, false);
        let hot = [3, 1, 2, 4, 3, 1];
        for (r, &h) in hot.iter().enumerate() {
            arch.normal.alpha.data_mut()[r * 5 + h] = 1.0;
        }
        let g = derive(&arch, &topo, None, Selection::Softmax).unwrap();
        assert_eq!(g.normal.iter().map(|g| topo.op_index(g.op).unwrap()).collect::<Vec<_>>(), hot);
    }

    #[test]
    fn none_is_never_chosen_and_ties_go_low() {
        let topo = CellTopology::nb201();
        let mut arch = ArchParams::zeros(&topo, None, false);
        arch.normal.alpha.data_mut()[0] = 5.0;
        let g = derive(&arch, &topo, None, Selection::Softmax).unwrap();
        assert_eq!(g.normal[0].op, OpKind::SkipConnect);
        assert!(g.normal.iter().all(|g| g.op == OpKind::SkipConnect));
    }

    #[test]
    fn darts_keeps_two_edges_per_node() {
        let topo = CellTopology::darts(false);
        let red = CellTopology::darts(true);
        let mut arch = ArchParams::zeros(&topo, Some(&red), false);
        // Node 4 has rows 5..9 (sources 0..3); favour sources 3 and 1.
        let sep = DARTS_OPS.iter().position(|&o| o == OpKind::SepConv3x3).unwrap();
        arch.normal.alpha.data_mut()[8 * 8 + sep] = 2.0;
        arch.normal.alpha.data_mut()[6 * 8 + sep] = 1.0;
        let g = derive(&arch, &topo, Some(&red), Selection::Softmax).unwrap();
        g.validate(&topo, Some(&red)).unwrap();
        let node4: Vec<(usize, OpKind)> = g.normal.iter().filter(|g| g.dst == 4).map(|g| (g.src, g.op)).collect();
        assert_eq!(node4, vec![(1, OpKind::SepConv3x3), (3, OpKind::SepConv3x3)]);
        assert_eq!(g.space, SpaceId::Darts);
    }

    #[test]
    fn gamma_selection_modes() {
        let topo = CellTopology::darts(false);
        let red = CellTopology::darts(true);
        let mut arch = ArchParams::zeros(&topo, Some(&red), true);
        // Node 2 has two incoming edges, always kept; node 3 picks 2 of 3 by γ.
        let g3 = arch.normal.gamma.iter_mut().find(|g| g.node == 3).unwrap();
        g3.weights.data_mut().copy_from_slice(&[-1.0, 2.0, 1.0]);
        let g = derive(&arch, &topo, Some(&red), Selection::Softmax).unwrap();
        let srcs: Vec<usize> = g.normal.iter().filter(|g| g.dst == 3).map(|g| g.src).collect();
        assert_eq!(srcs, vec![1, 2]);
        // Raw α·γ with all-zero α gives equal zero scores: lowest rows win.
        let g = derive(&arch, &topo, Some(&red), Selection::Raw).unwrap();
        let srcs: Vec<usize> = g.normal.iter().filter(|g| g.dst == 3).map(|g| g.src).collect();
        assert_eq!(srcs, vec![0, 1]);
    }

    #[test]
    fn every_argmax_pattern_of_the_reduced_cell() {
        use rand::{seq::SliceRandom, SeedableRng};
        let topo = CellTopology::reduced();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for pattern in 0..3usize.pow(6) {
            let want: Vec<usize> = (0..6).map(|e| pattern / 3usize.pow(e as u32) % 3).collect();
            // Distinct magnitudes of both signs, shuffled, then the edge's largest
            // moved onto the wanted op.
            let mut vals: Vec<f64> = (1..=18).map(|k| if k % 2 == 0 { k as f64 * 0.37 } else { -(k as f64) * 0.29 }).collect();
            vals.shuffle(&mut rng);
            let mut arch = ArchParams::zeros(&topo, None, false);
            for (e, &w) in want.iter().enumerate() {
                let row = &mut vals[e * 3..e * 3 + 3];
                let top = (0..3).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                row.swap(top, w);
            }
            arch.normal.alpha.data_mut().copy_from_slice(&vals);
            let brute: Vec<OpKind> = (0..6)
                .map(|e| {
                    let row = &vals[e * 3..e * 3 + 3];
                    topo.ops[(0..3).fold(0, |b, i| if row[i] > row[b] { i } else { b })]
                })
                .collect();
            for sel in [Selection::Softmax, Selection::Raw] {
                let g = derive(&arch, &topo, None, sel).unwrap();
                assert_eq!(g.normal.iter().map(|g| g.op).collect::<Vec<_>>(), brute, "pattern {pattern}");
            }
        }
    }
}
