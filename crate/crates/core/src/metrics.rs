//! Diagnostics over architecture weights and trained supernets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixed::{beta_of, ArchParams};
use crate::search::{correct_count, SearchTrace};
use crate::space::{Genotype, Network, OpKind, REDUCED_OPS};
use crate::tensor::{Tape, Tensor};

/// Sample statistics of α; `std` divides by N.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

pub fn alpha_summary(values: &[f64]) -> AlphaSummary {
    if values.is_empty() {
        return AlphaSummary { mean: 0.0, median: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    AlphaSummary { mean, median, std }
}

/// Per-epoch α statistics of a trace.
pub fn alpha_stats(trace: &SearchTrace) -> Vec<(usize, AlphaSummary)> {
    trace.rows.iter().map(|r| (r.epoch, alpha_summary(&r.alpha))).collect()
}

/// `β₁ − β₂` of one row of β values.
pub fn top2_gap(beta: &[f64]) -> f64 {
    let mut s = beta.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    match s.as_slice() {
        [a, b, ..] => a - b,
        _ => 0.0,
    }
}

/// Smallest top-2 β gap over every edge of every table.
pub fn min_top2_gap(arch: &ArchParams) -> f64 {
    arch.tables().flat_map(|t| t.betas()).map(|b| top2_gap(&b)).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDispersion {
    /// 0 for the normal table, 1 for the reduction table.
    pub table: usize,
    pub row: usize,
    /// β sorted descending.
    pub sorted_beta: Vec<f64>,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub trials: Vec<Vec<EdgeDispersion>>,
    /// Per trial, the gap of its closest edge.
    pub min_gaps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

pub fn edge_dispersion(arch: &ArchParams) -> Vec<EdgeDispersion> {
    let mut out = Vec::new();
    for (ti, t) in arch.tables().enumerate() {
        for (row, mut b) in t.betas().into_iter().enumerate() {
            b.sort_by(|x, y| y.total_cmp(x));
            let gap = top2_gap(&b);
            out.push(EdgeDispersion { table: ti, row, sorted_beta: b, gap });
        }
    }
    out
}

/// Top-2 β gaps of every trial's final α, aggregated over each trial's closest edge.
pub fn dispersion_report(snapshots: &[ArchParams]) -> Result<DispersionReport> {
    if snapshots.is_empty() {
        return Err(Error::contract("dispersion report needs at least one trial"));
    }
    let trials: Vec<Vec<EdgeDispersion>> = snapshots.iter().map(edge_dispersion).collect();
    let min_gaps: Vec<f64> = trials.iter().map(|t| t.iter().map(|e| e.gap).fold(f64::INFINITY, f64::min)).collect();
    let s = alpha_summary(&min_gaps);
    Ok(DispersionReport { trials, min_gaps, mean: s.mean, std: s.std, median: s.median })
}

/// Variance decomposition of one three-op edge, with the current mixed
/// output standing in for the unobservable optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    pub ops: Vec<OpKind>,
    pub beta: Vec<f64>,
    /// `Var(o(x) − m̄)` per op.
    pub var: Vec<f64>,
    /// Pairwise `Cov(o_i − m̄, o_j − m̄)`.
    pub cov: Vec<Vec<f64>>,
    /// Per op, the sum of the other two ops' variances.
    pub rhs: Vec<f64>,
    /// `Σ exp(α) − (2 Σ Var − 3 Σ_{i<j} Cov)`.
    pub exp_sum_residual: f64,
    /// `Var(o_c − m̄) > Var(o_a − m̄) > Var(x − m̄)`.
    pub ordering_holds: bool,
}

/// Average over feature positions of the across-batch covariance.
fn batch_cov(a: &[f64], b: &[f64], n: usize) -> f64 {
    let f = a.len() / n;
    let mut total = 0.0;
    for j in 0..f {
        let ma = (0..n).map(|i| a[i * f + j]).sum::<f64>() / n as f64;
        let mb = (0..n).map(|i| b[i * f + j]).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (a[i * f + j] - ma) * (b[i * f + j] - mb)).sum::<f64>() / n as f64;
    }
    total / f as f64
}

/// Diagnostics of edge `src -> dst` in cell `cell` of a reduced-space supernet.
pub fn variance_diagnostics(
    net: &Network,
    arch: &ArchParams,
    cell: usize,
    src: usize,
    dst: usize,
    batch: &Tensor,
) -> Result<VarianceDiagnostics> {
    let n = batch.shape()[0];
    if n < 2 {
        return Err(Error::contract("variance diagnostics need a batch of at least 2"));
    }
    if arch.ops != REDUCED_OPS || net.pc_k().is_some() {
        return Err(Error::contract("variance diagnostics need a full-channel conv/skip/avg supernet"));
    }
    let row = net
        .normal_topology()
        .searchable_edges()
        .find(|(_, e)| e.src == src && e.dst == dst)
        .map(|(r, _)| r)
        .ok_or_else(|| Error::contract(format!("edge ({src}, {dst}) is not searchable")))?;
    let mut tape = Tape::new();
    let x = tape.leaf_with(batch, false);
    let w = net.params.register(&mut tape, false);
    let binding = arch.bind(&mut tape, false)?;
    let (_, nodes) = net.forward_with_nodes(&mut tape, x, &w, Some(&binding), None)?;
    let input = *nodes.get(cell).and_then(|c| c.get(src)).ok_or_else(|| Error::contract(format!("no cell {cell}")))?;
    let cands = net.edge_candidates(cell, src, dst, &w).ok_or_else(|| Error::contract("edge not in network"))?;
    let outs = cands.iter().map(|op| op.apply(&mut tape, input).map(|v| tape.value(v).to_vec())).collect::<Result<Vec<_>>>()?;
    let alpha = arch.normal.row(row).to_vec();
    let beta = beta_of(&alpha);
    let mbar: Vec<f64> = (0..outs[0].len()).map(|i| outs.iter().zip(&beta).map(|(o, b)| b * o[i]).sum()).collect();
    let diffs: Vec<Vec<f64>> = outs.iter().map(|o| o.iter().zip(&mbar).map(|(a, m)| a - m).collect()).collect();
    let k = diffs.len();
    let cov: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| batch_cov(&diffs[i], &diffs[j], n)).collect()).collect();
    let var: Vec<f64> = (0..k).map(|i| cov[i][i].max(0.0)).collect();
    let total_var: f64 = var.iter().sum();
    let rhs = var.iter().map(|v| total_var - v).collect();
    let cross: f64 = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).map(|(i, j)| cov[i][j]).sum();
    let exp_sum: f64 = alpha.iter().map(|a| a.exp()).sum();
    let (c, s, a) = (var[0], var[1], var[2]);
    Ok(VarianceDiagnostics {
        ops: arch.ops.clone(),
        beta,
        var: var.clone(),
        cov,
        rhs,
        exp_sum_residual: exp_sum - (2.0 * total_var - 3.0 * cross),
        ordering_holds: c > a && a > s,
    })
}

/// Mean cross-entropy and accuracy of `net` on `data` (no partial channels).
pub fn evaluate_network(net: &Network, arch: Option<&ArchParams>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if net.pc_k().is_some() {
        return Err(Error::contract("evaluation of partial-channel supernets needs a channel sampler"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let xv = tape.leaf_with(&x, false);
        let w = net.params.register(&mut tape, false);
        let b = arch.map(|a| a.bind(&mut tape, false)).transpose()?;
        let logits = net.forward(&mut tape, xv, &w, b.as_ref(), None)?;
        correct += correct_count(tape.value(logits), &labels);
        let l = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(l)[0] * chunk.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub supernet_loss: f64,
    pub supernet_acc: f64,
    pub discrete_loss: f64,
    pub discrete_acc: f64,
    /// `|acc(supernet) − acc(discrete)|`.
    pub gap: f64,
    /// `|loss(supernet) − loss(discrete)|`.
    pub loss_gap: f64,
}

/// The discrete network of `genotype` carrying the supernet's weights for its ops.
pub fn inherit_discrete(net: &Network, genotype: &Genotype) -> Result<Network> {
    let mut child = Network::discrete(genotype, net.normal_topology(), net.stack(), 0)?;
    let copied = child.params.copy_matching_from(&net.params);
    if copied != child.params.len() {
        return Err(Error::contract(format!(
            "only {copied} of {} child weights exist in the supernet",
            child.params.len()
        )));
    }
    Ok(child)
}

/// Supernet vs. derived child on the same data, the child inheriting weights.
pub fn discrepancy_gap(net: &Network, arch: &ArchParams, genotype: &Genotype, data: &Dataset, batch_size: usize) -> Result<Discrepancy> {
    let (supernet_loss, supernet_acc) = evaluate_network(net, Some(arch), data, batch_size)?;
    let child = inherit_discrete(net, genotype)?;
    let (discrete_loss, discrete_acc) = evaluate_network(&child, None, data, batch_size)?;
    Ok(Discrepancy {
        supernet_loss,
        supernet_acc,
        discrete_loss,
        discrete_acc,
        gap: (supernet_acc - discrete_acc).abs(),
        loss_gap: (supernet_loss - discrete_loss).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub coords: Vec<f64>,
    /// `loss[i][j]` at `α* + coords[i]·d₁ + coords[j]·d₂`.
    pub loss: Vec<Vec<f64>>,
    pub acc: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    /// Mean `|loss − loss(0,0)|` over grid points within `radius` of the origin.
    pub fn mean_abs_delta(&self, radius: f64) -> f64 {
        let c = self.coords.iter().position(|&x| x == 0.0).expect("symmetric grid holds 0");
        let center = self.loss[c][c];
        let mut total = 0.0;
        let mut n = 0;
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                if a * a + b * b <= radius * radius {
                    total += (self.loss[i][j] - center).abs();
                    n += 1;
                }
            }
        }
        total / n as f64
    }
}

/// Two seeded Gaussian directions over all α entries, each rescaled per row
/// to that row's norm (unit norm for all-zero rows).
pub fn landscape_directions(arch: &ArchParams, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| {
        let mut d = Vec::new();
        for t in arch.tables() {
            for row in t.rows() {
                let raw: Vec<f64> = row.iter().map(|_| StandardNormal.sample(rng)).collect();
                let rn = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let an = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let target = if an > 0.0 { an } else { 1.0 };
                d.extend(raw.iter().map(|v| v * target / rn.max(f64::MIN_POSITIVE)));
            }
        }
        d
    };
    let d1 = make(&mut rng);
    let d2 = make(&mut rng);
    (d1, d2)
}

/// Evaluates `eval` at `α* + a·d₁ + b·d₂` for every `(a, b)` in `grid²`.
pub fn landscape_scan(
    arch: &ArchParams,
    grid: &[f64],
    seed: u64,
    mut eval: impl FnMut(&ArchParams) -> Result<(f64, f64)>,
) -> Result<LandscapeGrid> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let symmetric = sorted.iter().zip(sorted.iter().rev()).all(|(a, b)| a == &-b) && sorted.contains(&0.0);
    if !symmetric {
        return Err(Error::contract("landscape grid must be symmetric around 0 and contain 0"));
    }
    let (d1, d2) = landscape_directions(arch, seed);
    let mut loss = vec![vec![0.0; grid.len()]; grid.len()];
    let mut acc = loss.clone();
    for (i, &a) in grid.iter().enumerate() {
        for (j, &b) in grid.iter().enumerate() {
            let mut p = arch.clone();
            let mut k = 0;
            for t in p.alpha_tensors_mut() {
                for v in t.data_mut() {
                    if a != 0.0 || b != 0.0 {
                        *v += a * d1[k] + b * d2[k];
                    }
                    k += 1;
                }
            }
            (loss[i][j], acc[i][j]) = eval(&p)?;
        }
    }
    Ok(LandscapeGrid { coords: grid.to_vec(), loss, acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{CellTopology, SpaceId, StackSpec};

    #[test]
    fn summary_examples() {
        let s = alpha_summary(&[2.5; 7]);
        assert_eq!((s.mean, s.median, s.std), (2.5, 2.5, 0.0));
        let s = alpha_summary(&[-1.0, 0.0, 1.0]);
        assert_eq!((s.mean, s.median), (0.0, 0.0));
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(top2_gap(&beta_of(&[0.3; 4])), 0.0);
        let b = beta_of(&[0.0, 0.1, 0.0, 0.0, 0.0]);
        assert!((b[1] - 0.216).abs() < 5e-4 && (b[0] - 0.196).abs() < 5e-4);
        let exact = (0.1f64.exp() - 1.0) / (0.1f64.exp() + 4.0);
        assert!((top2_gap(&b) - exact).abs() < 1e-15);
        let topo = CellTopology::reduced();
        let r = dispersion_report(&[ArchParams::zeros(&topo, None, false)]).unwrap();
        assert_eq!(r.min_gaps, vec![0.0]);
        assert!(dispersion_report(&[]).is_err());
    }

    fn setup() -> (Network, Tensor) {
        let topo = CellTopology::reduced();
        let stack = StackSpec { in_channels: 1, channels: 4, cells: 1, reduction_at: vec![], num_classes: 2, image_size: 6 };
        let net = Network::supernet(&topo, &stack, None, 5).unwrap();
        let x = Tensor::new(vec![4, 1, 6, 6], (0..144).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        (net, x)
    }

    #[test]
    fn variance_with_skip_one_hot() {
        let (net, x) = setup();
        let mut arch = ArchParams::zeros(net.normal_topology(), None, false);
        for r in 0..6 {
            arch.normal.alpha.data_mut()[r * 3..r * 3 + 3].copy_from_slice(&[-800.0, 0.0, -800.0]);
        }
        let d = variance_diagnostics(&net, &arch, 0, 0, 1, &x).unwrap();
        assert_eq!(d.var[1], 0.0);
        assert!(d.var.iter().all(|&v| v >= 0.0));
        assert!(variance_diagnostics(&net, &arch, 0, 0, 1, &Tensor::zeros(&[1, 1, 6, 6])).is_err());
    }

    #[test]
    fn landscape_center_is_exact() {
        let topo = CellTopology::reduced();
        let mut arch = ArchParams::zeros(&topo, None, false);
        arch.normal.alpha.data_mut().iter_mut().enumerate().for_each(|(i, a)| *a = i as f64 * 0.1 - 0.4);
        let f = |p: &ArchParams| Ok((p.all_alpha().iter().map(|a| a.sin()).sum::<f64>(), 0.5));
        let g = landscape_scan(&arch, &[-1.0, 0.0, 1.0], 3, f).unwrap();
        assert_eq!(g.loss[1][1], f(&arch).unwrap().0);
        assert_eq!(g, landscape_scan(&arch, &[-1.0, 0.0, 1.0], 3, f).unwrap());
        assert!(landscape_scan(&arch, &[0.0, 1.0], 3, f).is_err());
        let (d1, _) = landscape_directions(&arch, 3);
        for (r, row) in arch.normal.rows().enumerate() {
            let dn: f64 = d1[r * 3..r * 3 + 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            let an: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((dn - an).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_supernet_matches_child() {
        let (net, x) = setup();
        let mut arch = ArchParams::zeros(net.normal_topology(), None, false);
        let hot = [0, 1, 2, 0, 0, 1];
        for (r, &h) in hot.iter().enumerate() {
            for o in 0..3 {
                arch.normal.alpha.data_mut()[r * 3 + o] = if o == h { 0.0 } else { -800.0 };
            }
        }
        let g = crate::derive::derive(&arch, net.normal_topology(), None, Default::default()).unwrap();
        assert_eq!(g.space, SpaceId::Reduced);
        let data = Dataset::new(x.data().to_vec(), vec![0, 1, 1, 0], 1, 6, 2).unwrap();
        let d = discrepancy_gap(&net, &arch, &g, &data, 4).unwrap();
        assert!(d.loss_gap <= 1e-9 * d.supernet_loss.abs().max(1.0));
        assert_eq!(d.gap, 0.0);
    }
}
