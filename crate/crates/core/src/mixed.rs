//! Continuous relaxation of the per-edge operation choice.
//!
//! Each searchable edge owns one row of an α table; its softmax β weights the
//! candidate outputs. Optional per-node edge weights γ reweight the incoming
//! searchable edges of a node, and partial-channel mixing runs the candidates
//! on a random subset of channels only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CellTopology, OpKind, SpaceId};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Softmax of one α row.
pub fn beta_of(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Edge weights of one intermediate node over its incoming searchable edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGamma {
    pub node: usize,
    /// α rows of the incoming searchable edges, in topology order.
    pub rows: Vec<usize>,
    pub weights: Tensor,
}

/// α table `[edges, ops]` of one cell type, with optional γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub alpha: Tensor,
    #[serde(default)]
    pub gamma: Vec<NodeGamma>,
}

impl AlphaTable {
    fn new(topo: &CellTopology, with_gamma: bool) -> Self {
        let alpha = Tensor::zeros(&[topo.num_searchable(), topo.num_ops()]).with_grad();
        let gamma = if with_gamma {
            topo.intermediate_nodes()
                .filter_map(|node| {
                    let rows = topo.incoming_rows(node);
                    (!rows.is_empty()).then(|| NodeGamma {
                        node,
                        weights: Tensor::zeros(&[rows.len()]).with_grad(),
                        rows,
                    })
                })
                .collect()
        } else {
            vec![]
        };
        AlphaTable { alpha, gamma }
    }

    pub fn num_edges(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn row(&self, e: usize) -> &[f64] {
        let n = self.num_ops();
        &self.alpha.data()[e * n..(e + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.alpha.data().chunks(self.num_ops())
    }

    pub fn betas(&self) -> Vec<Vec<f64>> {
        self.rows().map(beta_of).collect()
    }

    /// Softmaxed γ weight of searchable edge `row`, if γ is present.
    pub fn edge_weight(&self, row: usize) -> Option<f64> {
        self.gamma.iter().find_map(|g| {
            let pos = g.rows.iter().position(|&r| r == row)?;
            Some(beta_of(g.weights.data())[pos])
        })
    }
}

/// Architecture parameters of a search: one table per cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub space: SpaceId,
    pub ops: Vec<OpKind>,
    pub normal: AlphaTable,
    #[serde(default)]
    pub reduce: Option<AlphaTable>,
}

/// Tape handles of the architecture parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct CellBinding {
    pub alpha: Var,
    pub beta: Var,
    /// `(node, rows, raw γ)` for nodes with edge weights.
    pub gamma: Vec<(usize, Vec<usize>, Var)>,
    pub num_ops: usize,
}

#[derive(Clone, Debug)]
pub struct ArchBinding {
    pub normal: CellBinding,
    pub reduce: Option<CellBinding>,
    leaves: Vec<Var>,
}

impl ArchBinding {
    pub fn cell(&self, reduction: bool) -> &CellBinding {
        match (&self.reduce, reduction) {
            (Some(r), true) => r,
            _ => &self.normal,
        }
    }
}

impl ArchParams {
    /// All-zero α (uniform β) shaped for the given topologies.
    pub fn zeros(normal: &CellTopology, reduce: Option<&CellTopology>, with_gamma: bool) -> Self {
        ArchParams {
            space: normal.space,
            ops: normal.ops.clone(),
            normal: AlphaTable::new(normal, with_gamma),
            reduce: reduce.map(|t| AlphaTable::new(t, with_gamma)),
        }
    }

    pub fn tables(&self) -> impl Iterator<Item = &AlphaTable> {
        std::iter::once(&self.normal).chain(self.reduce.as_ref())
    }

    pub fn tables_mut(&mut self) -> impl Iterator<Item = &mut AlphaTable> {
        std::iter::once(&mut self.normal).chain(self.reduce.as_mut())
    }

    /// Every trainable tensor: per table the α then the γ vectors.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for t in self.tables_mut() {
            out.push(&mut t.alpha);
            out.extend(t.gamma.iter_mut().map(|g| &mut g.weights));
        }
        out
    }

    pub fn alpha_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tables_mut().map(|t| &mut t.alpha).collect()
    }

    /// All α entries, normal table first.
    pub fn all_alpha(&self) -> Vec<f64> {
        self.tables().flat_map(|t| t.alpha.data().iter().copied()).collect()
    }

    pub fn has_gamma(&self) -> bool {
        !self.normal.gamma.is_empty()
    }

    /// Puts α (and γ) on the tape and computes β = softmax(α) per row.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Result<ArchBinding> {
        let mut leaves = Vec::new();
        let mut bind_table = |tape: &mut Tape, t: &AlphaTable| -> Result<CellBinding> {
            let alpha = tape.leaf_with(&t.alpha, train);
            leaves.push(alpha);
            let mut gamma = Vec::new();
            for g in &t.gamma {
                let v = tape.leaf_with(&g.weights, train);
                leaves.push(v);
                gamma.push((g.node, g.rows.clone(), v));
            }
            let beta = tape.softmax(alpha, 1)?;
            Ok(CellBinding { alpha, beta, gamma, num_ops: t.num_ops() })
        };
        let normal = bind_table(tape, &self.normal)?;
        let reduce = self.reduce.as_ref().map(|t| bind_table(tape, t)).transpose()?;
        Ok(ArchBinding { normal, reduce, leaves })
    }

    pub fn accumulate(&mut self, grads: &Gradients, binding: &ArchBinding) -> Result<()> {
        for (t, &v) in self.tensors_mut().into_iter().zip(&binding.leaves) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// An edge candidate with its weights already on the tape.
#[derive(Clone, Debug)]
pub struct BoundOp {
    pub kind: OpKind,
    pub weights: Vec<Var>,
    pub stride: usize,
}

impl BoundOp {
    pub fn new(kind: OpKind, stride: usize) -> Self {
        BoundOp { kind, weights: vec![], stride }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.kind.apply(tape, x, &self.weights, self.stride)
    }
}

/// `Σ_o β[offset + o] · op_o(x)`. Zero ops contribute nothing and are skipped.
pub fn mixed_forward(tape: &mut Tape, x: Var, ops: &[BoundOp], beta: Var, offset: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(ops.len());
    for (o, op) in ops.iter().enumerate() {
        if op.kind == OpKind::None {
            continue;
        }
        let y = op.apply(tape, x)?;
        terms.push(tape.scale_by(y, beta, offset + o)?);
    }
    if terms.is_empty() {
        let first = ops.first().ok_or_else(|| Error::dim("mixed_forward", "edge has no candidates"))?;
        return first.apply(tape, x);
    }
    tape.add_n(&terms)
}

/// Seeded source of channel permutations for partial-channel mixing.
#[derive(Clone, Debug)]
pub struct PcSampler {
    pub k: usize,
    rng: ChaCha8Rng,
}

impl PcSampler {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("partial-channel ratio k must be positive"));
        }
        Ok(PcSampler { k, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Generator for one optimizer step: the run seed xor the step index.
    pub fn for_step(k: usize, run_seed: u64, step: u64) -> Result<Self> {
        Self::new(k, run_seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn permutation(&mut self, channels: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..channels).collect();
        p.shuffle(&mut self.rng);
        p
    }
}

/// Number of channels a partial-channel edge sends through its candidates.
pub fn pc_selected(channels: usize, k: usize) -> usize {
    channels / k
}

/// Shuffles channels, mixes the first `⌊C/k⌋`, and appends the rest untouched
/// (max-pooled 2x2 on stride-2 edges). Returns the output and the permutation.
pub fn partial_channel_forward(
    tape: &mut Tape,
    x: Var,
    ops: &[BoundOp],
    beta: Var,
    offset: usize,
    sampler: &mut PcSampler,
) -> Result<(Var, Vec<usize>)> {
    let c = *tape.shape(x).get(1).ok_or_else(|| Error::dim("partial_channel", "expected NCHW input"))?;
    let k = sampler.k;
    if c < k {
        return Err(Error::contract(format!("partial-channel ratio {k} exceeds {c} channels")));
    }
    let perm = sampler.permutation(c);
    let sel = pc_selected(c, k);
    let x1 = tape.channel_select(x, &perm[..sel])?;
    let mixed = mixed_forward(tape, x1, ops, beta, offset)?;
    if sel == c {
        return Ok((mixed, perm));
    }
    let mut x2 = tape.channel_select(x, &perm[sel..])?;
    let stride = ops.first().map_or(1, |o| o.stride);
    if stride == 2 {
        x2 = tape.max_pool2d(x2, 2, 2, 0)?;
    }
    let out = tape.channel_concat(&[mixed, x2])?;
    Ok((out, perm))
}

/// Sum of edge outputs, or their softmax(γ)-weighted sum when `gamma` is given.
pub fn node_aggregate(tape: &mut Tape, outputs: &[Var], gamma: Option<Var>) -> Result<Var> {
    match gamma {
        None => tape.add_n(outputs),
        Some(g) => {
            if tape.shape(g) != [outputs.len()] {
                return Err(Error::dim(
                    "node_aggregate",
                    format!("{} edge outputs but gamma has shape {:?}", outputs.len(), tape.shape(g)),
                ));
            }
            let w = tape.softmax(g, 0)?;
            let terms = outputs.iter().enumerate().map(|(i, &o)| tape.scale_by(o, w, i)).collect::<Result<Vec<_>>>()?;
            tape.add_n(&terms)
        }
    }
}
