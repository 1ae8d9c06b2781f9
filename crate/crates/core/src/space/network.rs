use serde::{Deserialize, Serialize};

use super::genotype::Genotype;
use super::ops::{Cost, OpKind};
use super::params::ParamStore;
use super::topology::{CellTopology, EdgeRole, SpaceId};
use crate::error::{Error, Result};
use crate::mixed::{self, ArchBinding, BoundOp, PcSampler};
use crate::tensor::{Conv2dSpec, Tape, Var};

/// Shape of the stacked network around the cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub in_channels: usize,
    pub channels: usize,
    pub cells: usize,
    /// Cell positions that are reduction cells (DARTS space only).
    #[serde(default)]
    pub reduction_at: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl StackSpec {
    pub fn validate(&self, space: SpaceId) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.cells == 0 || self.num_classes < 2 || self.image_size == 0 {
            return Err(Error::contract(format!("stack spec has a non-positive size: {self:?}")));
        }
        if let Some(&r) = self.reduction_at.iter().find(|&&r| r >= self.cells) {
            return Err(Error::contract(format!("reduction position {r} beyond {} cells", self.cells)));
        }
        if space != SpaceId::Darts && !self.reduction_at.is_empty() {
            return Err(Error::contract(format!("the {space} space has no reduction cells")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PlannedOp {
    kind: OpKind,
    weights: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
enum PlannedKind {
    Mixed { row: usize, ops: Vec<PlannedOp> },
    Single(PlannedOp),
}

#[derive(Clone, Debug, PartialEq)]
struct PlannedEdge {
    src: usize,
    dst: usize,
    stride: usize,
    kind: PlannedKind,
}

#[derive(Clone, Debug, PartialEq)]
struct PreOp {
    weight: usize,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct CellPlan {
    reduction: bool,
    channels: usize,
    /// Input spatial size (after preprocessing).
    in_size: usize,
    pre: Vec<PreOp>,
    edges: Vec<PlannedEdge>,
}

/// A stacked cell network: either the supernet (mixed edges) or a discrete
/// child (one op per kept edge).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    space: SpaceId,
    stack: StackSpec,
    normal: CellTopology,
    reduce: Option<CellTopology>,
    cells: Vec<CellPlan>,
    stem: usize,
    head_w: usize,
    head_b: usize,
    pc_k: Option<usize>,
    genotype: Option<Genotype>,
    pub params: ParamStore,
}

/// What a cell edge should become during planning.
enum EdgeSource<'a> {
    Super { pc_k: Option<usize> },
    Discrete(&'a Genotype),
}

impl Network {
    /// Builds the supernet. `pc_k` enables partial-channel mixing, in which
    /// case mixed-op weights are sized for the `⌊C/k⌋` selected channels.
    pub fn supernet(normal: &CellTopology, stack: &StackSpec, pc_k: Option<usize>, seed: u64) -> Result<Self> {
        if pc_k == Some(0) {
            return Err(Error::contract("partial-channel ratio k must be positive"));
        }
        Self::build(normal, stack, EdgeSource::Super { pc_k }, seed)
    }

    /// Builds the discrete network of `genotype`, keeping only its chosen ops.
    pub fn discrete(genotype: &Genotype, normal: &CellTopology, stack: &StackSpec, seed: u64) -> Result<Self> {
        let reduce = (normal.space == SpaceId::Darts).then(|| CellTopology::darts(true));
        genotype.validate(normal, reduce.as_ref())?;
        Self::build(normal, stack, EdgeSource::Discrete(genotype), seed)
    }

    fn build(normal: &CellTopology, stack: &StackSpec, source: EdgeSource<'_>, seed: u64) -> Result<Self> {
        normal.validate()?;
        stack.validate(normal.space)?;
        let space = normal.space;
        let reduce = (space == SpaceId::Darts).then(|| CellTopology::darts(true));
        let mut params = ParamStore::default();
        let c0 = stack.channels;
        let stem = params.add_kaiming("stem.w".into(), vec![c0, stack.in_channels, 3, 3], stack.in_channels * 9, seed);

        let mut cells = Vec::with_capacity(stack.cells);
        let mut size = stack.image_size;
        // (channels, spatial) of the two previous outputs, bi-chain style.
        let (mut c_pp, mut c_p, mut size_pp) = (c0, c0, size);
        let mut c_cur = c0;
        let mut prev_reduction = false;
        for ci in 0..stack.cells {
            let reduction = stack.reduction_at.contains(&ci);
            let topo = if reduction { reduce.as_ref().expect("darts has a reduce topology") } else { normal };
            let mut pre = Vec::new();
            if space == SpaceId::Darts {
                if reduction {
                    c_cur *= 2;
                }
                let s0 = if prev_reduction { 2 } else { 1 };
                if size_pp != size * s0 {
                    return Err(Error::contract(format!("cell {ci}: input sizes {size_pp} and {size} do not chain")));
                }
                let w0 = params.add_kaiming(format!("c{ci}.pre0.w"), vec![c_cur, c_pp, 1, 1], c_pp, seed);
                let w1 = params.add_kaiming(format!("c{ci}.pre1.w"), vec![c_cur, c_p, 1, 1], c_p, seed);
                pre.push(PreOp { weight: w0, stride: s0 });
                pre.push(PreOp { weight: w1, stride: 1 });
            }
            let genes = match &source {
                EdgeSource::Discrete(g) => Some(if reduction { &g.reduce } else { &g.normal }),
                EdgeSource::Super { .. } => None,
            };
            let mut edges = Vec::new();
            for e in &topo.edges {
                let stride = if reduction && e.src < topo.num_inputs { 2 } else { 1 };
                let op = |kind: OpKind, channels: usize, params: &mut ParamStore| {
                    let weights = kind
                        .weight_specs(channels, stride)
                        .into_iter()
                        .map(|w| {
                            let fan_in: usize = w.shape[1..].iter().product();
                            params.add_kaiming(format!("c{ci}.e{}-{}.{}.{}", e.src, e.dst, kind, w.role), w.shape, fan_in, seed)
                        })
                        .collect();
                    PlannedOp { kind, weights }
                };
                let kind = match (e.role, &source, genes) {
                    (EdgeRole::Fixed(kind), _, _) => PlannedKind::Single(op(kind, c_cur, &mut params)),
                    (EdgeRole::Searchable { row }, EdgeSource::Super { pc_k }, _) => {
                        let ch = match pc_k {
                            Some(k) if c_cur < *k => {
                                return Err(Error::contract(format!("partial-channel ratio {k} exceeds {c_cur} channels")))
                            }
                            Some(k) => mixed::pc_selected(c_cur, *k),
                            None => c_cur,
                        };
                        PlannedKind::Mixed { row, ops: topo.ops.iter().map(|&k| op(k, ch, &mut params)).collect() }
                    }
                    (EdgeRole::Searchable { .. }, EdgeSource::Discrete(_), Some(genes)) => {
                        match genes.iter().find(|g| g.src == e.src && g.dst == e.dst) {
                            Some(g) => PlannedKind::Single(op(g.op, c_cur, &mut params)),
                            None => continue,
                        }
                    }
                    (EdgeRole::Searchable { .. }, EdgeSource::Discrete(_), None) => unreachable!(),
                };
                edges.push(PlannedEdge { src: e.src, dst: e.dst, stride, kind });
            }
            let in_size = size;
            if reduction {
                size = size.div_ceil(2);
            }
            cells.push(CellPlan { reduction, channels: c_cur, in_size, pre, edges });
            let c_out = if space == SpaceId::Darts { c_cur * topo.intermediate_nodes().len() } else { c_cur };
            size_pp = in_size;
            c_pp = c_p;
            c_p = c_out;
            prev_reduction = reduction;
        }
        let head_w = params.add_kaiming("head.w".into(), vec![c_p, stack.num_classes], c_p, seed);
        let head_b = params.add_zeros("head.b".into(), vec![stack.num_classes]);
        let genotype = match source {
            EdgeSource::Discrete(g) => Some(g.clone()),
            EdgeSource::Super { .. } => None,
        };
        let pc_k = match source {
            EdgeSource::Super { pc_k } => pc_k,
            EdgeSource::Discrete(_) => None,
        };
        Ok(Network {
            space,
            stack: stack.clone(),
            normal: normal.clone(),
            reduce,
            cells,
            stem,
            head_w,
            head_b,
            pc_k,
            genotype,
            params,
        })
    }

    pub fn space(&self) -> SpaceId {
        self.space
    }

    pub fn stack(&self) -> &StackSpec {
        &self.stack
    }

    pub fn normal_topology(&self) -> &CellTopology {
        &self.normal
    }

    pub fn reduce_topology(&self) -> Option<&CellTopology> {
        self.reduce.as_ref()
    }

    pub fn is_supernet(&self) -> bool {
        self.genotype.is_none()
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn pc_k(&self) -> Option<usize> {
        self.pc_k
    }

    /// Scalar weights inside cells (excludes stem and head).
    pub fn cell_params(&self) -> usize {
        self.params.num_params_with_prefix("c")
    }

    /// Analytic size: parameters and multiply-adds per sample.
    pub fn cost(&self) -> Cost {
        let s = &self.stack;
        let mut total = Cost {
            params: self.params.num_params() as u64,
            mult_adds: (s.channels * s.in_channels * 9 * s.image_size * s.image_size) as u64,
        };
        let mut last_c = s.channels;
        for cell in &self.cells {
            for p in &cell.pre {
                let numel = self.params.iter().nth(p.weight).map_or(0, |(_, t)| t.numel());
                total.mult_adds += (numel * cell.in_size * cell.in_size) as u64;
            }
            for e in &cell.edges {
                let ops: Vec<&PlannedOp> = match &e.kind {
                    PlannedKind::Mixed { ops, .. } => ops.iter().collect(),
                    PlannedKind::Single(op) => vec![op],
                };
                let ch = match (&e.kind, self.pc_k) {
                    (PlannedKind::Mixed { .. }, Some(k)) => mixed::pc_selected(cell.channels, k),
                    _ => cell.channels,
                };
                for op in ops {
                    total.mult_adds += op.kind.cost(ch, cell.in_size, cell.in_size, e.stride).mult_adds;
                }
            }
            last_c = if self.space == SpaceId::Darts { cell.channels * 4 } else { cell.channels };
        }
        total.mult_adds += (last_c * s.num_classes) as u64;
        total
    }

    /// Logits `[N, classes]` for an NCHW batch. `arch` is required for
    /// supernets; `pc` draws channel permutations when partial channels are on.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        w: &[Var],
        arch: Option<&ArchBinding>,
        pc: Option<&mut PcSampler>,
    ) -> Result<Var> {
        self.forward_with_nodes(tape, x, w, arch, pc).map(|(y, _)| y)
    }

    /// Like [`Network::forward`], also returning every cell's node values.
    pub fn forward_with_nodes(
        &self,
        tape: &mut Tape,
        x: Var,
        w: &[Var],
        arch: Option<&ArchBinding>,
        mut pc: Option<&mut PcSampler>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        if w.len() != self.params.len() {
            return Err(Error::contract("weight vars do not match the network's parameter store"));
        }
        if self.is_supernet() && arch.is_none() {
            return Err(Error::contract("supernet forward needs architecture parameters"));
        }
        if self.pc_k.is_some() && pc.is_none() {
            return Err(Error::contract("partial-channel supernet needs a channel sampler"));
        }
        let stem = tape.conv2d(x, w[self.stem], Conv2dSpec::same(3))?;
        let (mut s0, mut s1) = (stem, stem);
        let mut all_nodes = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let (out, nodes) = self.cell_forward(tape, cell, s0, s1, w, arch, pc.as_deref_mut())?;
            all_nodes.push(nodes);
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(s1)?;
        let logits = tape.matmul(pooled, w[self.head_w])?;
        Ok((tape.add_row_bias(logits, w[self.head_b])?, all_nodes))
    }

    /// The candidates of edge `src -> dst` in cell `cell`, bound to `w`.
    pub fn edge_candidates(&self, cell: usize, src: usize, dst: usize, w: &[Var]) -> Option<Vec<BoundOp>> {
        let e = self.cells.get(cell)?.edges.iter().find(|e| e.src == src && e.dst == dst)?;
        Some(match &e.kind {
            PlannedKind::Mixed { ops, .. } => ops.iter().map(|op| bind(op, e.stride, w)).collect(),
            PlannedKind::Single(op) => vec![bind(op, e.stride, w)],
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_forward(
        &self,
        tape: &mut Tape,
        cell: &CellPlan,
        s0: Var,
        s1: Var,
        w: &[Var],
        arch: Option<&ArchBinding>,
        mut pc: Option<&mut PcSampler>,
    ) -> Result<(Var, Vec<Var>)> {
        let topo = if cell.reduction { self.reduce.as_ref().unwrap_or(&self.normal) } else { &self.normal };
        let mut nodes: Vec<Option<Var>> = vec![None; topo.num_nodes];
        if cell.pre.is_empty() {
            nodes[0] = Some(s1);
        } else {
            for (i, (p, s)) in cell.pre.iter().zip([s0, s1]).enumerate() {
                let r = tape.relu(s);
                let spec = Conv2dSpec { stride: p.stride, padding: 0, dilation: 1, groups: 1 };
                nodes[i] = Some(tape.conv2d(r, w[p.weight], spec)?);
            }
        }
        let binding = arch.map(|a| a.cell(cell.reduction));
        for dst in topo.intermediate_nodes() {
            let mut searched = Vec::new();
            let mut fixed = Vec::new();
            for e in cell.edges.iter().filter(|e| e.dst == dst) {
                let x = nodes[e.src].ok_or_else(|| Error::contract(format!("node {} has no value", e.src)))?;
                match &e.kind {
                    PlannedKind::Single(op) => {
                        let bound = bind(op, e.stride, w);
                        fixed.push(bound.apply(tape, x)?);
                    }
                    PlannedKind::Mixed { row, ops } => {
                        let b = binding.ok_or_else(|| Error::contract("mixed edge without architecture binding"))?;
                        let bound: Vec<BoundOp> = ops.iter().map(|op| bind(op, e.stride, w)).collect();
                        let offset = row * b.num_ops;
                        let y = match pc.as_deref_mut() {
                            Some(s) => mixed::partial_channel_forward(tape, x, &bound, b.beta, offset, s)?.0,
                            None => mixed::mixed_forward(tape, x, &bound, b.beta, offset)?,
                        };
                        searched.push((*row, y));
                    }
                }
            }
            let gamma = binding.and_then(|b| b.gamma.iter().find(|(n, _, _)| *n == dst));
            let mut parts = fixed;
            if !searched.is_empty() {
                match gamma {
                    Some((_, rows, g)) => {
                        let ordered: Vec<Var> = rows
                            .iter()
                            .map(|r| searched.iter().find(|(row, _)| row == r).map(|&(_, v)| v))
                            .collect::<Option<_>>()
                            .ok_or_else(|| Error::contract(format!("gamma rows of node {dst} do not match its edges")))?;
                        parts.push(mixed::node_aggregate(tape, &ordered, Some(*g))?);
                    }
                    None => parts.extend(searched.into_iter().map(|(_, v)| v)),
                }
            }
            if parts.is_empty() {
                return Err(Error::contract(format!("node {dst} has no incoming edges")));
            }
            nodes[dst] = Some(mixed::node_aggregate(tape, &parts, None)?);
        }
        let nodes: Vec<Var> = nodes.into_iter().map(|n| n.expect("every node is filled")).collect();
        let outs = &nodes[topo.num_inputs..];
        let out = if self.space == SpaceId::Darts {
            tape.channel_concat(outs)?
        } else {
            *outs.last().expect("cell has intermediate nodes")
        };
        Ok((out, nodes))
    }
}

fn bind(op: &PlannedOp, stride: usize, w: &[Var]) -> BoundOp {
    BoundOp { kind: op.kind, weights: op.weights.iter().map(|&i| w[i]).collect(), stride }
}
