//! First-order alternating search of architecture and network weights.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive::{derive, Selection};
use crate::error::{Error, Result};
use crate::metrics::{alpha_summary, min_top2_gap};
use crate::mixed::{ArchBinding, ArchParams, PcSampler};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::regularizers::RegularizerSpec;
use crate::space::{CellTopology, Genotype, Network, OpKind, StackSpec};
use crate::tensor::{Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaInit {
    /// Every entry uniform in ±1e-3.
    SmallRandom,
    /// Zeros, plus `delta` on `op` in every row.
    ConstantOffset { op: String, delta: f64 },
    /// Every entry equal to `value`.
    ConstantNegative { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaOptimSpec {
    pub lr: f64,
    pub betas: (f64, f64),
    /// Defaults to the regularizer's convention when absent.
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightOptimSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialChannelSpec {
    pub k: usize,
    #[serde(default)]
    pub edge_weights: bool,
}

fn default_clip() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    #[serde(default)]
    pub warm_up_epochs: usize,
    pub batch_size: usize,
    pub alpha_optim: AlphaOptimSpec,
    pub weight_optim: WeightOptimSpec,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub alpha_init: AlphaInit,
    #[serde(default)]
    pub partial_channel: Option<PartialChannelSpec>,
    pub regularizer: RegularizerSpec,
    #[serde(default)]
    pub selection: Selection,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warm_up_epochs >= self.epochs {
            return Err(Error::contract(format!(
                "warm-up ({}) must be shorter than the run ({} epochs)",
                self.warm_up_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.alpha_optim.lr > 0.0 && self.weight_optim.lr > 0.0) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::contract("gradient clip must be positive"));
        }
        if matches!(self.partial_channel, Some(PartialChannelSpec { k: 0, .. })) {
            return Err(Error::contract("partial-channel ratio k must be positive"));
        }
        self.regularizer.validate()
    }

    pub fn alpha_weight_decay(&self) -> f64 {
        self.alpha_optim.weight_decay.unwrap_or_else(|| self.regularizer.default_alpha_weight_decay())
    }
}

/// Architecture parameters initialized per `strategy`; γ starts at zero.
pub fn init_arch_params(
    strategy: &AlphaInit,
    normal: &CellTopology,
    reduce: Option<&CellTopology>,
    edge_weights: bool,
    seed: u64,
) -> Result<ArchParams> {
    let mut arch = ArchParams::zeros(normal, reduce, edge_weights);
    match strategy {
        AlphaInit::SmallRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1FA);
            for t in arch.alpha_tensors_mut() {
                t.data_mut().iter_mut().for_each(|a| *a = rng.random_range(-1e-3..=1e-3));
            }
        }
        AlphaInit::ConstantOffset { op, delta } => {
            let kind: OpKind = op.parse()?;
            let idx = normal.op_index(kind)?;
            let n = normal.num_ops();
            for t in arch.alpha_tensors_mut() {
                t.data_mut().iter_mut().skip(idx).step_by(n).for_each(|a| *a = *delta);
            }
        }
        AlphaInit::ConstantNegative { value } => {
            for t in arch.alpha_tensors_mut() {
                t.data_mut().iter_mut().for_each(|a| *a = *value);
            }
        }
    }
    Ok(arch)
}

/// Training and validation splits of one search.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub train: Dataset,
    pub val: Dataset,
}

/// Samples read from each split by each phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub alpha_train: u64,
    pub alpha_val: u64,
    pub weight_train: u64,
    pub weight_val: u64,
    pub eval_val: u64,
}

/// One row per finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lambda: f64,
    pub weight_lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub alpha_mean: f64,
    pub alpha_median: f64,
    pub alpha_std: f64,
    pub min_gap: f64,
    pub genotype: String,
    /// Every α entry, normal table first.
    pub alpha: Vec<f64>,
    /// Every γ entry, if edge weights are on.
    #[serde(default)]
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
}

impl SearchTrace {
    pub const CSV_COLUMNS: [&'static str; 12] = [
        "epoch",
        "lambda",
        "weight_lr",
        "train_loss",
        "train_acc",
        "val_loss",
        "val_acc",
        "alpha_mean",
        "alpha_median",
        "alpha_std",
        "min_gap",
        "genotype",
    ];

    /// Scalar columns as CSV; α snapshots are kept in the JSON form only.
    pub fn to_csv(&self) -> String {
        let rows = self.rows.iter().map(|r| {
            let nums = [r.lambda, r.weight_lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.alpha_mean, r.alpha_median, r.alpha_std, r.min_gap];
            std::iter::once(r.epoch.to_string()).chain(nums.map(|v| v.to_string())).chain([r.genotype.clone()])
        });
        crate::table::csv_string(&Self::CSV_COLUMNS, rows)
    }
}

fn stream_seed(seed: u64, tag: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.rotate_left(32) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Everything needed to continue a search.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub config: SearchConfig,
    pub net: Network,
    pub arch: ArchParams,
    adam: Adam,
    sgd: Sgd,
    pub epoch: usize,
    step: u64,
    pub trace: SearchTrace,
    pub access: AccessLog,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: SearchConfig,
    stack: StackSpec,
    normal: CellTopology,
    params: crate::space::ParamStore,
    arch: ArchParams,
    adam: Adam,
    sgd: Sgd,
    epoch: usize,
    step: u64,
    trace: SearchTrace,
    access: AccessLog,
}

/// Loss and accuracy of one forward pass.
pub(crate) struct Pass {
    pub loss: f64,
    pub correct: usize,
}

pub(crate) fn correct_count(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| crate::mixed::argmax(&logits[i * k..(i + 1) * k]) == l)
        .count()
}

impl SearchState {
    pub fn new(config: SearchConfig, normal: &CellTopology, stack: &StackSpec) -> Result<Self> {
        config.validate()?;
        let pc_k = config.partial_channel.as_ref().map(|p| p.k);
        let net = Network::supernet(normal, stack, pc_k, config.seed)?;
        let edge_weights = config.partial_channel.as_ref().is_some_and(|p| p.edge_weights);
        let arch = init_arch_params(&config.alpha_init, normal, net.reduce_topology(), edge_weights, config.seed)?;
        let adam = Adam::new(config.alpha_optim.lr, config.alpha_optim.betas, config.alpha_weight_decay());
        let w = &config.weight_optim;
        let sgd = Sgd::new(w.lr, w.momentum, w.weight_decay);
        Ok(SearchState { config, net, arch, adam, sgd, epoch: 0, step: 0, trace: SearchTrace::default(), access: AccessLog::default() })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn genotype(&self) -> Result<Genotype> {
        derive(&self.arch, self.net.normal_topology(), self.net.reduce_topology(), self.config.selection)
    }

    pub fn lambda(&self, epoch: usize) -> Result<f64> {
        self.config.regularizer.lambda.value(epoch, self.config.warm_up_epochs)
    }

    fn sampler(&self, step: u64) -> Result<Option<PcSampler>> {
        self.net.pc_k().map(|k| PcSampler::for_step(k, self.config.seed, step)).transpose()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        data: &Dataset,
        idx: &[usize],
        train_w: bool,
        train_a: bool,
        step: u64,
    ) -> Result<(Var, Vec<Var>, ArchBinding, Pass)> {
        let (x, labels) = data.batch(idx);
        let xv = tape.leaf_with(&x, false);
        let w = self.net.params.register(tape, train_w);
        let binding = self.arch.bind(tape, train_a)?;
        let mut sampler = self.sampler(step)?;
        let logits = self.net.forward(tape, xv, &w, Some(&binding), sampler.as_mut())?;
        let correct = correct_count(tape.value(logits), &labels);
        let loss = tape.cross_entropy(logits, &labels)?;
        let pass = Pass { loss: tape.value(loss)[0], correct };
        Ok((loss, w, binding, pass))
    }

    fn alpha_step(&mut self, data: &Dataset, idx: &[usize], lambda: f64, costs: &[f64]) -> Result<Pass> {
        let mut tape = Tape::new();
        let (ce, _, binding, pass) = self.forward(&mut tape, data, idx, false, true, self.step)?;
        let alphas: Vec<Var> = std::iter::once(binding.normal.alpha).chain(binding.reduce.as_ref().map(|b| b.alpha)).collect();
        let betas: Vec<Var> = std::iter::once(binding.normal.beta).chain(binding.reduce.as_ref().map(|b| b.beta)).collect();
        let loss = match self.config.regularizer.loss(&mut tape, &alphas, &betas, lambda, costs)? {
            Some(r) => tape.add(ce, r)?,
            None => ce,
        };
        let total = tape.value(loss)[0];
        if !total.is_finite() {
            return Err(Error::Divergence { epoch: self.epoch, detail: format!("validation objective is {total}") });
        }
        let grads = tape.backward(loss)?;
        self.arch.zero_grad();
        self.arch.accumulate(&grads, &binding)?;
        self.adam.step(&mut self.arch.tensors_mut())?;
        self.arch.zero_grad();
        Ok(pass)
    }

    fn weight_step(&mut self, data: &Dataset, idx: &[usize], lr: f64) -> Result<Pass> {
        let mut tape = Tape::new();
        let (loss, w, _, pass) = self.forward(&mut tape, data, idx, true, false, self.step)?;
        if !pass.loss.is_finite() {
            return Err(Error::Divergence { epoch: self.epoch, detail: format!("training loss is {}", pass.loss) });
        }
        let grads = tape.backward(loss)?;
        self.net.params.zero_grad();
        self.net.params.accumulate(&grads, &w)?;
        let mut ts: Vec<_> = self.net.params.tensors_mut().collect();
        clip_grad_norm(&mut ts, self.config.grad_clip);
        self.sgd.lr = lr;
        self.sgd.step(&mut ts)?;
        self.net.params.zero_grad();
        Ok(pass)
    }

    /// Forward-only loss and accuracy of the supernet on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0;
        for (b, idx) in (0..data.len()).collect::<Vec<_>>().chunks(self.config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let (_, _, _, pass) = self.forward(&mut tape, data, idx, false, false, u64::MAX - b as u64)?;
            loss += pass.loss * idx.len() as f64;
            correct += pass.correct;
        }
        let n = data.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Op costs used by the FLOPs penalty: multiply-adds at the stem resolution.
    fn op_costs(&self) -> Vec<f64> {
        let s = self.net.stack();
        self.net
            .normal_topology()
            .ops
            .iter()
            .map(|op| op.cost(s.channels, s.image_size, s.image_size, 1).mult_adds as f64)
            .collect()
    }

    /// One epoch: interleaved α steps on validation batches and w steps on
    /// training batches; only w steps during warm-up.
    pub fn run_epoch(&mut self, data: &SearchData) -> Result<()> {
        if self.is_done() {
            return Err(Error::contract(format!("search already ran its {} epochs", self.config.epochs)));
        }
        let epoch = self.epoch;
        let searching = epoch >= self.config.warm_up_epochs;
        let lambda = if searching { self.lambda(epoch)? } else { 0.0 };
        let lr = cosine_lr(self.config.weight_optim.lr, epoch, self.config.epochs);
        let costs = if self.config.regularizer.flops_weight > 0.0 { self.op_costs() } else { vec![] };
        let bs = self.config.batch_size;
        let train_batches = data.train.batches(bs, &mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, 1, epoch)));
        let val_batches = data.val.batches(bs, &mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, 2, epoch)));

        let (mut tl, mut tc, mut vl, mut vc) = (0.0, 0usize, 0.0, 0usize);
        let n = train_batches.len().max(val_batches.len());
        for i in 0..n {
            if searching {
                if let Some(idx) = val_batches.get(i) {
                    let p = self.alpha_step(&data.val, idx, lambda, &costs)?;
                    self.access.alpha_val += idx.len() as u64;
                    vl += p.loss * idx.len() as f64;
                    vc += p.correct;
                }
            }
            if let Some(idx) = train_batches.get(i) {
                let p = self.weight_step(&data.train, idx, lr)?;
                self.access.weight_train += idx.len() as u64;
                tl += p.loss * idx.len() as f64;
                tc += p.correct;
            }
            self.step += 1;
        }
        let (val_loss, val_acc) = if searching {
            (vl / data.val.len() as f64, vc as f64 / data.val.len() as f64)
        } else {
            self.access.eval_val += data.val.len() as u64;
            self.evaluate(&data.val)?
        };
        let alpha = self.arch.all_alpha();
        let stats = alpha_summary(&alpha);
        let gamma = self.arch.tables().flat_map(|t| t.gamma.iter().flat_map(|g| g.weights.data().iter().copied())).collect();
        self.trace.rows.push(TraceRow {
            epoch,
            lambda,
            weight_lr: lr,
            train_loss: tl / data.train.len() as f64,
            train_acc: tc as f64 / data.train.len() as f64,
            val_loss,
            val_acc,
            alpha_mean: stats.mean,
            alpha_median: stats.median,
            alpha_std: stats.std,
            min_gap: min_top2_gap(&self.arch),
            genotype: self.genotype()?.canonical(),
            alpha,
            gamma,
        });
        self.epoch += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            stack: self.net.stack().clone(),
            normal: self.net.normal_topology().clone(),
            params: self.net.params.clone(),
            arch: self.arch.clone(),
            adam: self.adam.clone(),
            sgd: self.sgd.clone(),
            epoch: self.epoch,
            step: self.step,
            trace: self.trace.clone(),
            access: self.access,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        let mut state = SearchState::new(ck.config, &ck.normal, &ck.stack)?;
        if ck.params.len() != state.net.params.len() {
            return Err(Error::Schema("checkpoint weights do not match the network".into()));
        }
        state.net.params = ck.params;
        state.arch = ck.arch;
        state.adam = ck.adam;
        state.sgd = ck.sgd;
        state.epoch = ck.epoch;
        state.step = ck.step;
        state.trace = ck.trace;
        state.access = ck.access;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Result of a completed search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub state: SearchState,
}

impl SearchOutcome {
    pub fn trace(&self) -> &SearchTrace {
        &self.state.trace
    }
}

/// Runs all configured epochs and derives the final genotype.
pub fn run_search(config: &SearchConfig, normal: &CellTopology, stack: &StackSpec, data: &SearchData) -> Result<SearchOutcome> {
    let mut state = SearchState::new(config.clone(), normal, stack)?;
    while !state.is_done() {
        state.run_epoch(data)?;
    }
    Ok(SearchOutcome { genotype: state.genotype()?, state })
}
