use super::kernels::{self, Conv2dSpec, ConvDims, PoolSpec};
use super::{check_shape, erf, erf_derivative, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    ScaleBy { x: Var, s: Var, idx: usize },
    Exp(Var),
    Log(Var),
    Erf(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    AvgPool { x: Var, pool: PoolSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    ChannelSelect { x: Var, channels: Vec<usize> },
    ChannelConcat(Vec<Var>),
    GlobalAvgPool(Var),
    Reshape(Var),
    Row { x: Var, row: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order.
///
/// Nodes are appended only after their inputs exist, so the node vector is
/// already a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, format!("expected NCHW input, got shape {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Registers a tensor as a leaf; it receives gradients iff it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers a leaf with an explicit gradient flag, ignoring the tensor's own.
    pub fn leaf_with(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_shape("constant", shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// The `zero` primitive: exact zeros of the given shape, no gradient.
    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rec, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, rec, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulConst(x, c))
    }

    /// Multiplies every element of `x` by the single element `s[idx]`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = *self
            .value(s)
            .get(idx)
            .ok_or_else(|| Error::dim("scale_by", format!("index {idx} out of range for {:?}", self.shape(s))))?;
        let value = self.value(x).iter().map(|&v| v * sv).collect();
        let ng = self.ng(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::ScaleBy { x, s, idx }, ng))
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::dim("add_n", "no operands"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(x, erf, Op::Erf(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![m], Op::Mean(x), ng)
    }

    /// Sums out `axis`; a 1-D input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + k) * inner + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.iter().enumerate().filter(|&(a, _)| a != axis).map(|(_, &d)| d).collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(oshape, out, Op::SumAxis { x, axis }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|k| (xv[at(k)] - m).exp()).sum();
                for k in 0..len {
                    out[at(k)] = (xv[at(k)] - m).exp() / z;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, ng))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(Error::dim("cross_entropy", format!("expected [N, K] logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(vec![1], vec![loss / n as f64], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?} (axis 1 vs axis 0)"))),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = match (self.shape(x), self.shape(b)) {
            (&[_, n], &[nb]) if n == nb => n,
            (sx, sb) => return Err(Error::dim("add_row_bias", format!("{sx:?} vs bias {sb:?}"))),
        };
        let bv = self.value(b).to_vec();
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let ng = self.ng(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRowBias(x, b), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let d = self.conv_dims(x, w, &spec)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &d, &spec);
        let ng = self.ng(&[x, w]);
        Ok(self.push(vec![d.n, d.c_out, d.oh, d.ow], out, Op::Conv2d { x, w, spec }, ng))
    }

    fn conv_dims(&self, x: Var, w: Var, spec: &Conv2dSpec) -> Result<ConvDims> {
        let (n, c_in, h, wd) = nchw("conv2d", self.shape(x))?;
        let (c_out, wc, k) = match *self.shape(w) {
            [co, wc, kh, kw] if kh == kw => (co, wc, kh),
            ref s => return Err(Error::dim("conv2d", format!("weight must be [C_out, C_in/g, k, k], got {s:?}"))),
        };
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::dim("conv2d", format!("groups {} must divide C_in {c_in} and C_out {c_out}", spec.groups)));
        }
        if wc != c_in / spec.groups {
            return Err(Error::dim(
                "conv2d",
                format!("weight axis 1 is {wc} but input axis 1 gives {} per group", c_in / spec.groups),
            ));
        }
        let (Some(oh), Some(ow)) = (spec.out_dim(h, k), spec.out_dim(wd, k)) else {
            return Err(Error::dim("conv2d", format!("kernel {k} does not fit spatial {h}x{wd}")));
        };
        Ok(ConvDims { n, c_in, h, w: wd, c_out, k, oh, ow })
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("avg_pool2d", self.shape(x))?;
        let pool = PoolSpec { k, stride, padding };
        if pool.out_dim(h).is_none() || pool.out_dim(w).is_none() || padding >= k {
            return Err(Error::dim("avg_pool2d", format!("window {k} invalid for spatial {h}x{w}")));
        }
        let (out, oh, ow) = kernels::avg_pool_forward(self.value(x), n * c, h, w, &pool);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool { x, pool }, ng))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("max_pool2d", self.shape(x))?;
        let pool = PoolSpec { k, stride, padding };
        if pool.out_dim(h).is_none() || pool.out_dim(w).is_none() || padding >= k {
            return Err(Error::dim("max_pool2d", format!("window {k} invalid for spatial {h}x{w}")));
        }
        let (out, argmax, oh, ow) = kernels::max_pool_forward(self.value(x), n * c, h, w, &pool);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool { x, argmax }, ng))
    }

    /// Gathers channels of an NCHW value in the given order.
    pub fn channel_select(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let (n, c, h, w) = nchw("channel_select", self.shape(x))?;
        if channels.is_empty() || channels.iter().any(|&ch| ch >= c) {
            return Err(Error::dim("channel_select", format!("channels {channels:?} invalid for C={c}")));
        }
        let plane = h * w;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * channels.len() * plane);
        for b in 0..n {
            for &ch in channels {
                let s = (b * c + ch) * plane;
                out.extend_from_slice(&xv[s..s + plane]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, channels.len(), h, w], out, Op::ChannelSelect { x, channels: channels.to_vec() }, ng))
    }

    /// Concatenates NCHW values along the channel axis.
    pub fn channel_concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("channel_concat", "no operands"))?;
        let (n, _, h, w) = nchw("channel_concat", self.shape(first))?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (n2, c, h2, w2) = nchw("channel_concat", self.shape(x))?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::dim(
                    "channel_concat",
                    format!("axes 0/2/3 differ: {:?} vs {:?}", self.shape(first), self.shape(x)),
                ));
            }
            chans.push(c);
        }
        let plane = h * w;
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                let v = self.value(x);
                out.extend_from_slice(&v[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let ng = self.ng(xs);
        Ok(self.push(vec![n, total, h, w], out, Op::ChannelConcat(xs.to_vec()), ng))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let out = self.value(x).chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Row `row` of a 2-D value.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::dim("row", format!("expected 2-D, got {s:?}"))),
        };
        if row >= r {
            return Err(Error::dim("row", format!("row {row} out of range for {r} rows")));
        }
        let value = self.value(x)[row * c..(row + 1) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![c], value, Op::Row { x, row }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * bv[i]));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * av[i]));
            }
            Op::AddConst(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MulConst(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::ScaleBy { x, s: sv, idx } => {
                let scale = val(*sv)[*idx];
                let xv = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * scale));
                if wants(*sv) {
                    let dot: f64 = xv.iter().zip(g).map(|(a, b)| a * b).sum();
                    acc(*sv, &mut |s| s[*idx] += dot);
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * y[i]));
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / xv[i]));
            }
            Op::Erf(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * erf_derivative(xv[i])));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| (0..s.len()).for_each(|i| if xv[i] > 0.0 { s[i] += g[i] }));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                s[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for r in 0..n {
                        for c in 0..k {
                            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                            s[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                s[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = nodes[b.0].value.len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| g.iter().enumerate().for_each(|(i, g)| s[i % n] += g));
            }
            Op::Conv2d { x, w, spec } => {
                let d = self.conv_dims(*x, *w, spec).expect("validated in forward");
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, &d, spec, wants(*x), wants(*w));
                if let Some(gx) = gx {
                    acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, g)| *s += g));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |s| s.iter_mut().zip(&gw).for_each(|(s, g)| *s += g));
                }
            }
            Op::AvgPool { x, pool } => {
                let [n, c, h, w] = nodes[x.0].shape[..] else { unreachable!() };
                let gx = kernels::avg_pool_backward(g, n * c, h, w, pool);
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, g)| *s += g));
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |s| argmax.iter().zip(g).for_each(|(&i, g)| s[i] += g));
            }
            Op::ChannelSelect { x, channels } => {
                let [n, c, h, w] = nodes[x.0].shape[..] else { unreachable!() };
                let plane = h * w;
                acc(*x, &mut |s| {
                    for b in 0..n {
                        for (j, &ch) in channels.iter().enumerate() {
                            let src = (b * channels.len() + j) * plane;
                            let dst = (b * c + ch) * plane;
                            for p in 0..plane {
                                s[dst + p] += g[src + p];
                            }
                        }
                    }
                });
            }
            Op::ChannelConcat(xs) => {
                let [n, total, h, w] = node.shape[..] else { unreachable!() };
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x.0].shape[1];
                    acc(x, &mut |s| {
                        for b in 0..n {
                            let src = (b * total + offset) * plane;
                            let dst = b * c * plane;
                            for p in 0..c * plane {
                                s[dst + p] += g[src + p];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = nodes[x.0].shape[..] else { unreachable!() };
                let plane = h * w;
                acc(*x, &mut |s| {
                    for (i, s) in s.iter_mut().enumerate() {
                        *s += g[i / plane] / plane as f64;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Row { x, row } => {
                let c = node.value.len();
                acc(*x, &mut |s| (0..c).for_each(|j| s[row * c + j] += g[j]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap().with_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[1.0, 2.0]).with_grad());
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        assert!(matches!(Tape::new().backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("axis"), "{err}");
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[1.0, 2.0]).with_grad());
        let c = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
