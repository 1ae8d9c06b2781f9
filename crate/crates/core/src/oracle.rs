//! Exhaustively trained micro search space used as a tabular benchmark.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_splits, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::evaluate_network;
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::space::{CellTopology, Gene, Genotype, Network, OpKind, StackSpec, REDUCED_OPS};
use crate::tensor::Tape;

pub const MAX_GENOTYPES: usize = 256;
pub const MAX_STEPS: usize = 500;
pub const BENCHMARK_VERSION: u32 = 1;

/// Plain SGD training of one discrete network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_clip() -> f64 {
    5.0
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > MAX_STEPS {
            return Err(Error::contract(format!("training steps must lie in 1..={MAX_STEPS}, got {}", self.steps)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::contract("training needs batch_size > 0, lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub val_loss: f64,
    pub val_acc: f64,
    pub losses: Vec<f64>,
    pub param_count: usize,
}

/// Trains `genotype` from scratch on `train`, cosine lr over the step budget,
/// and evaluates on `val`.
pub fn train_discrete(
    genotype: &Genotype,
    topo: &CellTopology,
    stack: &StackSpec,
    train: &Dataset,
    val: &Dataset,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut net = Network::discrete(genotype, topo, stack, seed)?;
    let mut sgd = Sgd::new(spec.lr, spec.momentum, spec.weight_decay);
    let mut losses = Vec::with_capacity(spec.steps);
    let mut batches = Vec::new();
    let mut pass = 0;
    for step in 0..spec.steps {
        if batches.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pass as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            batches = train.batches(spec.batch_size, &mut rng);
            batches.reverse();
            pass += 1;
        }
        let idx = batches.pop().expect("refilled above");
        let (x, labels) = train.batch(&idx);
        let mut tape = Tape::new();
        let xv = tape.leaf_with(&x, false);
        let w = net.params.register(&mut tape, true);
        let logits = net.forward(&mut tape, xv, &w, None, None)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Divergence { epoch: step, detail: format!("discrete training loss is {value}") });
        }
        losses.push(value);
        if net.params.is_empty() {
            continue;
        }
        let grads = tape.backward(loss)?;
        net.params.zero_grad();
        net.params.accumulate(&grads, &w)?;
        let mut ts: Vec<_> = net.params.tensors_mut().collect();
        clip_grad_norm(&mut ts, spec.grad_clip);
        // Cosine schedule over steps rather than epochs.
        sgd.lr = cosine_lr(spec.lr, step, spec.steps);
        sgd.step(&mut ts)?;
        net.params.zero_grad();
    }
    let (val_loss, val_acc) = evaluate_network(&net, None, val, spec.batch_size)?;
    Ok(TrainOutcome { val_loss, val_acc, losses, param_count: net.params.num_params() })
}

/// Everything that determines a benchmark table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub ops: Vec<OpKind>,
    pub searchable: Vec<(usize, usize)>,
    pub fixed: OpKind,
    pub stack: StackSpec,
    pub dataset: DatasetSpec,
    pub split: f64,
    pub split_seed: u64,
    pub train: TrainSpec,
    pub seeds: Vec<u64>,
}

impl OracleConfig {
    /// Reduced ops on the chain edges, shortcuts fixed to skip, three seeds.
    pub fn micro_default(dataset: DatasetSpec, stack: StackSpec, train: TrainSpec) -> Self {
        OracleConfig {
            ops: REDUCED_OPS.to_vec(),
            searchable: vec![(0, 1), (1, 2), (2, 3)],
            fixed: OpKind::SkipConnect,
            stack,
            dataset,
            split: 0.5,
            split_seed: 0,
            train,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn topology(&self) -> Result<CellTopology> {
        CellTopology::micro(self.ops.clone(), &self.searchable, self.fixed)
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.topology()?;
        self.stack.validate(topo.space)?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::contract("benchmark needs at least one training seed"));
        }
        let count = genotype_count(&topo);
        if count > MAX_GENOTYPES {
            return Err(Error::contract(format!("space has {count} genotypes, cap is {MAX_GENOTYPES}")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Train and validation splits of the configured dataset.
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        make_splits(&self.dataset.generate()?, self.split, self.split_seed)
    }
}

fn genotype_count(topo: &CellTopology) -> usize {
    topo.num_ops().checked_pow(topo.num_searchable() as u32).unwrap_or(usize::MAX)
}

/// Every genotype of a single-cell space, in lexicographic canonical order.
pub fn enumerate_genotypes(topo: &CellTopology) -> Result<Vec<Genotype>> {
    let count = genotype_count(topo);
    if count > MAX_GENOTYPES {
        return Err(Error::contract(format!("space has {count} genotypes, cap is {MAX_GENOTYPES}")));
    }
    let edges: Vec<(usize, usize)> = topo.searchable_edges().map(|(_, e)| (e.src, e.dst)).collect();
    let mut out: Vec<Genotype> = (0..count)
        .map(|mut code| {
            let normal = edges
                .iter()
                .map(|&(src, dst)| {
                    let op = topo.ops[code % topo.num_ops()];
                    code /= topo.num_ops();
                    Gene { src, dst, op }
                })
                .collect();
            Genotype { space: topo.space, normal, reduce: vec![] }
        })
        .collect();
    out.sort_by_cached_key(Genotype::canonical);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub genotype: Genotype,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub param_count: usize,
    /// SHA-256 over the little-endian bytes of every training loss, all seeds.
    pub loss_digest: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularBenchmark {
    pub version: u32,
    pub config: OracleConfig,
    pub config_hash: String,
    pub rows: BTreeMap<String, BenchmarkRow>,
}

/// Trains every genotype for every seed, in parallel over genotypes.
pub fn build_benchmark(config: &OracleConfig) -> Result<TabularBenchmark> {
    config.validate()?;
    let topo = config.topology()?;
    let (train, val) = config.splits()?;
    let genotypes = enumerate_genotypes(&topo)?;
    let rows: Vec<BenchmarkRow> = genotypes
        .into_par_iter()
        .map(|g| {
            let mut hasher = Sha256::new();
            let mut accs = Vec::with_capacity(config.seeds.len());
            let mut param_count = 0;
            let mut final_loss = 0.0;
            for &seed in &config.seeds {
                let out = train_discrete(&g, &topo, &config.stack, &train, &val, &config.train, seed)?;
                out.losses.iter().for_each(|l| hasher.update(l.to_le_bytes()));
                accs.push(out.val_acc);
                param_count = out.param_count;
                final_loss = *out.losses.last().unwrap_or(&f64::NAN);
            }
            let n = accs.len() as f64;
            let mean_acc = accs.iter().sum::<f64>() / n;
            let std_acc = (accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / n).sqrt();
            Ok(BenchmarkRow { genotype: g, accs, mean_acc, std_acc, param_count, loss_digest: hex::encode(hasher.finalize()), final_loss })
        })
        .collect::<Result<_>>()?;
    Ok(TabularBenchmark {
        version: BENCHMARK_VERSION,
        config: config.clone(),
        config_hash: config.hash()?,
        rows: rows.into_iter().map(|r| (r.genotype.canonical(), r)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub rank: usize,
    pub regret: f64,
}

impl TabularBenchmark {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn best_acc(&self) -> f64 {
        self.rows.values().map(|r| r.mean_acc).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Canonical keys from best to worst; equal accuracies in key order.
    pub fn ordered(&self) -> Vec<&str> {
        let mut keys: Vec<(&str, f64)> = self.rows.iter().map(|(k, r)| (k.as_str(), r.mean_acc)).collect();
        keys.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        keys.into_iter().map(|k| k.0).collect()
    }

    pub fn rank_of(&self, genotype: &Genotype) -> Result<Ranking> {
        let key = genotype.canonical();
        let row = self.rows.get(&key).ok_or_else(|| Error::Lookup(format!("genotype {key} is not in the benchmark")))?;
        let rank = self.ordered().iter().position(|k| *k == key).expect("row exists") + 1;
        Ok(Ranking { rank, regret: self.best_acc() - row.mean_acc })
    }

    /// Sorted regrets of all rows, best first.
    pub fn regrets(&self) -> Vec<f64> {
        let best = self.best_acc();
        let mut r: Vec<f64> = self.rows.values().map(|row| best - row.mean_acc).collect();
        r.sort_by(f64::total_cmp);
        r
    }

    /// Nearest-rank percentile of the regret distribution, `q` in (0, 100].
    pub fn regret_percentile(&self, q: f64) -> f64 {
        let r = self.regrets();
        let k = ((q / 100.0) * r.len() as f64).ceil().max(1.0) as usize;
        r[k.min(r.len()) - 1]
    }

    /// Errors when the table was built from a different configuration.
    pub fn check_config(&self, config: &OracleConfig) -> Result<()> {
        if self.config_hash != config.hash()? {
            return Err(Error::contract("benchmark was built from a different configuration"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: TabularBenchmark = serde_json::from_str(&s)?;
        if b.version != BENCHMARK_VERSION {
            return Err(Error::Schema(format!("benchmark version {} (expected {BENCHMARK_VERSION})", b.version)));
        }
        if b.config_hash != b.config.hash()? {
            return Err(Error::Integrity { path: path.to_path_buf(), detail: "config hash does not match its config".into() });
        }
        Ok(b)
    }
}
