//! Desk-scale search protocols and the comparative recipes built on them.
//!
//! Every recipe fans out independent searches over a bounded worker pool.
//! Trial `i` of a recipe seeds its search with `base_seed + i` and its
//! dataset with the protocol's dataset seed plus `i`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_splits, Dataset, DatasetSpec, Generator};
use crate::derive::skip_fraction;
use crate::error::{Error, Result};
use crate::metrics::{discrepancy_gap, dispersion_report, evaluate_network, landscape_scan, Discrepancy, DispersionReport, LandscapeGrid};
use crate::mixed::{argmax, beta_of, ArchParams};
use crate::oracle::{build_benchmark, train_discrete, OracleConfig, TabularBenchmark, TrainSpec};
use crate::pc_model::{expectation_check, ExpectationRow, LinearUnitModel};
use crate::regularizers::RegularizerSpec;
use crate::search::{run_search, AlphaInit, AlphaOptimSpec, SearchConfig, SearchData, SearchTrace, WeightOptimSpec};
use crate::table::csv_string;
use crate::space::{CellTopology, Gene, Genotype, OpKind, StackSpec, NB201_OPS, REDUCED_OPS};

/// Serializable description of a cell topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSpec {
    Darts,
    Nb201,
    Reduced,
    Micro { ops: Vec<OpKind>, searchable: Vec<(usize, usize)>, fixed: OpKind },
}

impl SpaceSpec {
    pub fn topology(&self) -> Result<CellTopology> {
        match self {
            SpaceSpec::Darts => Ok(CellTopology::darts(false)),
            SpaceSpec::Nb201 => Ok(CellTopology::nb201()),
            SpaceSpec::Reduced => Ok(CellTopology::reduced()),
            SpaceSpec::Micro { ops, searchable, fixed } => CellTopology::micro(ops.clone(), searchable, *fixed),
        }
    }

    /// The reduction-cell topology a network of this space carries.
    pub fn reduce_topology(&self) -> Option<CellTopology> {
        matches!(self, SpaceSpec::Darts).then(|| CellTopology::darts(true))
    }

    pub fn micro_default() -> Self {
        SpaceSpec::Micro { ops: REDUCED_OPS.to_vec(), searchable: vec![(0, 1), (1, 2), (2, 3)], fixed: OpKind::SkipConnect }
    }
}

/// One fully specified search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub space: SpaceSpec,
    pub stack: StackSpec,
    pub dataset: DatasetSpec,
    /// Fraction of the dataset used for the weight step; the rest drives α.
    pub split_fraction: f64,
    pub search: SearchConfig,
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        let topo = self.space.topology()?;
        self.stack.validate(topo.space)?;
        if self.stack.num_classes != self.dataset.num_classes() || self.stack.image_size != self.dataset.image_size {
            return Err(Error::contract(format!(
                "stack expects {} classes at {}px, dataset has {} at {}px",
                self.stack.num_classes,
                self.stack.image_size,
                self.dataset.num_classes(),
                self.dataset.image_size
            )));
        }
        if self.stack.in_channels != 1 {
            return Err(Error::contract("synthetic datasets are single-channel"));
        }
        self.search.validate()
    }

    /// The setup of trial `index`: seeds shifted by the index.
    pub fn for_trial(&self, base_seed: u64, index: usize) -> Setup {
        let mut s = self.clone();
        s.search.seed = base_seed.wrapping_add(index as u64);
        s.dataset.seed = self.dataset.seed.wrapping_add(index as u64);
        s
    }

    pub fn data(&self) -> Result<SearchData> {
        let (train, val) = make_splits(&self.dataset.generate()?, self.split_fraction, self.search.seed)?;
        Ok(SearchData { train, val })
    }

    pub fn with_regularizer(mut self, regularizer: RegularizerSpec) -> Self {
        self.search.regularizer = regularizer;
        self
    }

    /// Runs the search and evaluates the derived child on the α split.
    pub fn run(&self) -> Result<RunResult> {
        self.validate()?;
        let topo = self.space.topology()?;
        let data = self.data()?;
        let out = run_search(&self.search, &topo, &self.stack, &data)?;
        let discrepancy = if out.state.net.pc_k().is_none() {
            Some(discrepancy_gap(&out.state.net, &out.state.arch, &out.genotype, &data.val, 256)?)
        } else {
            None
        };
        let skip = skip_fraction(&out.state.arch, &topo, out.state.net.reduce_topology());
        Ok(RunResult { genotype: out.genotype, skip_fraction: skip, discrepancy, arch: out.state.arch, trace: out.state.trace })
    }
}

/// What a finished search leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub genotype: Genotype,
    pub skip_fraction: f64,
    pub discrepancy: Option<Discrepancy>,
    pub arch: ArchParams,
    pub trace: SearchTrace,
}

fn base_search(regularizer: RegularizerSpec) -> SearchConfig {
    SearchConfig {
        epochs: 50,
        warm_up_epochs: 0,
        batch_size: 16,
        alpha_optim: AlphaOptimSpec { lr: 3e-3, betas: (0.5, 0.999), weight_decay: None },
        weight_optim: WeightOptimSpec { lr: 0.01, momentum: 0.9, weight_decay: 3e-4 },
        grad_clip: 5.0,
        alpha_init: AlphaInit::SmallRandom,
        partial_channel: None,
        regularizer,
        selection: Default::default(),
        seed: 0,
    }
}

/// Reduced three-op cell, three stacked cells, oriented bars.
pub fn skip_dominance_setup(regularizer: RegularizerSpec) -> Setup {
    Setup {
        space: SpaceSpec::Reduced,
        stack: StackSpec { in_channels: 1, channels: 4, cells: 3, reduction_at: vec![], num_classes: 4, image_size: 8 },
        dataset: DatasetSpec { generator: Generator::Bars, samples: 256, image_size: 8, noise: 0.1, seed: 100 },
        split_fraction: 0.5,
        search: base_search(regularizer),
    }
}

/// The searchable edge of the unfair-init protocol.
pub const UNFAIR_EDGE: (usize, usize) = (0, 1);

/// One NB201 edge inside a residual cell, stacked three times, on dot pairs.
/// α starts at `[0, 0.1, 0, 0, 0]` and the first 15 epochs only train w.
pub fn unfair_init_setup(regularizer: RegularizerSpec) -> Setup {
    let mut search = base_search(regularizer);
    search.warm_up_epochs = 15;
    search.weight_optim.lr = 0.05;
    search.alpha_init = AlphaInit::ConstantOffset { op: OpKind::SkipConnect.name().into(), delta: 0.1 };
    Setup {
        space: SpaceSpec::Micro { ops: NB201_OPS.to_vec(), searchable: vec![UNFAIR_EDGE], fixed: OpKind::SkipConnect },
        stack: StackSpec { in_channels: 1, channels: 8, cells: 3, reduction_at: vec![], num_classes: 2, image_size: 8 },
        dataset: DatasetSpec { generator: Generator::DotPairs, samples: 1024, image_size: 8, noise: 0.1, seed: 100 },
        split_fraction: 0.5,
        search,
    }
}

/// Micro space supernet matching [`micro_oracle_config`].
pub fn micro_setup(regularizer: RegularizerSpec) -> Setup {
    let oracle = micro_oracle_config();
    Setup {
        space: SpaceSpec::micro_default(),
        stack: oracle.stack.clone(),
        dataset: oracle.dataset.clone(),
        split_fraction: 0.5,
        search: base_search(regularizer),
    }
}

/// The 27-genotype benchmark used by the oracle-score recipe.
pub fn micro_oracle_config() -> OracleConfig {
    OracleConfig::micro_default(
        DatasetSpec { generator: Generator::DotPairs, samples: 512, image_size: 8, noise: 0.1, seed: 7 },
        StackSpec { in_channels: 1, channels: 4, cells: 2, reduction_at: vec![], num_classes: 2, image_size: 8 },
        TrainSpec { steps: 300, batch_size: 16, lr: 0.025, momentum: 0.9, weight_decay: 3e-4, grad_clip: 5.0 },
    )
}

/// A named regularizer configuration compared by the recipes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub regularizer: RegularizerSpec,
}

impl Method {
    pub fn new(name: &str, regularizer: RegularizerSpec) -> Self {
        Method { name: name.into(), regularizer }
    }

    pub fn l2() -> Self {
        Method::new("l2", RegularizerSpec::l2(5e-4))
    }

    pub fn lse() -> Self {
        Method::new("lse", RegularizerSpec::lse(1.0))
    }

    /// Leaky-ReLU-like pair `ν = 0.25, μ = 1e6`.
    pub fn sa() -> Self {
        Method::new("sa", RegularizerSpec::sa(0.25, 1e6))
    }

    /// The three `(ν, μ)` pairs of the hyper-parameter grid.
    pub fn sa_grid() -> Vec<Method> {
        vec![
            Method::new("sa_nu1", RegularizerSpec::sa(1.0, 0.0)),
            Method::new("sa_nu0.25_mu1e6", RegularizerSpec::sa(0.25, 1e6)),
            Method::new("sa_nu0_mu0.707", RegularizerSpec::sa(0.0, std::f64::consts::FRAC_1_SQRT_2)),
        ]
    }
}

/// One search of a recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Unique within the recipe, usable as a directory name.
    pub id: String,
    pub method: String,
    pub trial: usize,
    pub setup: Setup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub spec: RunSpec,
    pub error: String,
}

/// Specs for every `(method, trial)` pair of `base`.
pub fn fan_out(base: &Setup, methods: &[Method], opts: &RecipeOptions) -> Vec<RunSpec> {
    methods
        .iter()
        .flat_map(|m| {
            (0..opts.trials).map(move |t| RunSpec {
                id: format!("{}-t{t:02}", m.name),
                method: m.name.clone(),
                trial: t,
                setup: base.clone().with_regularizer(m.regularizer.clone()).for_trial(opts.base_seed, t),
            })
        })
        .collect()
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))
}

/// Runs `run` on every spec over `jobs` workers, keeping input order.
pub fn run_specs_with<F>(specs: Vec<RunSpec>, jobs: usize, run: F) -> Result<(Vec<RunRecord>, Vec<RunFailure>)>
where
    F: Fn(&RunSpec) -> Result<RunResult> + Sync,
{
    let results: Vec<std::result::Result<RunRecord, RunFailure>> = worker_pool(jobs)?.install(|| {
        specs
            .into_par_iter()
            .map(|spec| match run(&spec) {
                Ok(result) => Ok(RunRecord { spec, result }),
                Err(e) => Err(RunFailure { error: e.to_string(), spec }),
            })
            .collect()
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(r) => ok.push(r),
            Err(f) => failed.push(f),
        }
    }
    Ok((ok, failed))
}

pub fn run_specs(specs: Vec<RunSpec>, jobs: usize) -> Result<(Vec<RunRecord>, Vec<RunFailure>)> {
    run_specs_with(specs, jobs, |s| s.setup.run())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    SkipDominance,
    UnfairInit,
    NegInit,
    Dispersion,
    Landscape,
    PcExpectation,
    HyperparamGrid,
    OracleScore,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::SkipDominance,
        Recipe::UnfairInit,
        Recipe::NegInit,
        Recipe::Dispersion,
        Recipe::Landscape,
        Recipe::PcExpectation,
        Recipe::HyperparamGrid,
        Recipe::OracleScore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::SkipDominance => "skip-dominance",
            Recipe::UnfairInit => "unfair-init",
            Recipe::NegInit => "neg-init",
            Recipe::Dispersion => "dispersion",
            Recipe::Landscape => "landscape",
            Recipe::PcExpectation => "pc-expectation",
            Recipe::HyperparamGrid => "hyperparam-grid",
            Recipe::OracleScore => "oracle-score",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown recipe `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeOptions {
    pub trials: usize,
    pub base_seed: u64,
    pub jobs: usize,
}

impl Default for RecipeOptions {
    fn default() -> Self {
        RecipeOptions { trials: 10, base_seed: 0, jobs: 1 }
    }
}

/// Per-run figures of the skip-dominance style recipes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRow {
    pub method: String,
    pub trial: usize,
    pub skip_fraction: f64,
    pub alpha_mean: f64,
    /// α mean strictly decreasing over every epoch after warm-up.
    pub alpha_mean_decreasing: bool,
    pub min_gap: f64,
    pub val_acc: f64,
    pub genotype: String,
}

impl SkipRow {
    pub fn of(r: &RunRecord) -> SkipRow {
        let rows = &r.result.trace.rows;
        let warm = r.spec.setup.search.warm_up_epochs;
        let post: Vec<f64> = rows.iter().filter(|row| row.epoch >= warm).map(|row| row.alpha_mean).collect();
        let last = rows.last();
        SkipRow {
            method: r.spec.method.clone(),
            trial: r.spec.trial,
            skip_fraction: r.result.skip_fraction,
            alpha_mean: last.map_or(0.0, |l| l.alpha_mean),
            alpha_mean_decreasing: post.len() >= 2 && post.windows(2).all(|w| w[1] < w[0]),
            min_gap: last.map_or(0.0, |l| l.min_gap),
            val_acc: last.map_or(0.0, |l| l.val_acc),
            genotype: r.result.genotype.canonical(),
        }
    }
}

/// Best discrete op for the unfair-init edge, by training each candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub op: OpKind,
    pub accs: Vec<(OpKind, f64)>,
}

/// Training budget for a derived child: the search's weight optimizer over
/// the search's epochs, capped at the oracle step limit.
pub fn child_train_spec(setup: &Setup, train_len: usize) -> TrainSpec {
    let w = &setup.search.weight_optim;
    let steps = (train_len / setup.search.batch_size.max(1) * setup.search.epochs).clamp(1, crate::oracle::MAX_STEPS);
    TrainSpec { steps, batch_size: setup.search.batch_size, lr: w.lr, momentum: w.momentum, weight_decay: w.weight_decay, grad_clip: setup.search.grad_clip }
}

/// Trains the single-op network of every candidate on the unfair-init data.
pub fn unfair_ground_truth(setup: &Setup) -> Result<GroundTruth> {
    let topo = setup.space.topology()?;
    let data = setup.data()?;
    let (src, dst) = topo.searchable_edges().map(|(_, e)| (e.src, e.dst)).next().ok_or_else(|| Error::contract("no searchable edge"))?;
    let spec = child_train_spec(setup, data.train.len());
    let mut accs = Vec::new();
    for &op in &topo.ops {
        let g = Genotype { space: topo.space, normal: vec![Gene { src, dst, op }], reduce: vec![] };
        let o = train_discrete(&g, &topo, &setup.stack, &data.train, &data.val, &spec, setup.search.seed)?;
        accs.push((op, o.val_acc));
    }
    let best = accs.iter().fold(0, |b, (i, a)| if *a > accs[b].1 { accs.iter().position(|x| x.0 == *i).unwrap_or(b) } else { b });
    Ok(GroundTruth { op: accs[best].0, accs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnfairRow {
    pub method: String,
    pub trial: usize,
    /// Argmax op of the edge after each epoch.
    pub argmax: Vec<OpKind>,
    pub final_beta: Vec<f64>,
    /// Ground truth held the argmax for each of the last 10 epochs.
    pub recovered: bool,
    /// Skip still the argmax at the end.
    pub skip_kept: bool,
}

/// Epochs over which recovery must hold.
pub const RECOVERY_WINDOW: usize = 10;

impl UnfairRow {
    pub fn of(r: &RunRecord, truth: OpKind) -> Result<UnfairRow> {
        let ops = r.spec.setup.space.topology()?.ops;
        let argmax: Vec<OpKind> = r.result.trace.rows.iter().map(|row| ops[argmax(&row.alpha[..ops.len()])]).collect();
        let tail = &argmax[argmax.len().saturating_sub(RECOVERY_WINDOW)..];
        Ok(UnfairRow {
            method: r.spec.method.clone(),
            trial: r.spec.trial,
            recovered: argmax.len() >= RECOVERY_WINDOW && tail.iter().all(|&o| o == truth),
            skip_kept: argmax.last() == Some(&OpKind::SkipConnect),
            final_beta: beta_of(r.result.arch.normal.row(0)),
            argmax,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegInitRow {
    pub value: f64,
    pub trial: usize,
    pub skip_fraction: f64,
    pub genotype: String,
}

/// The four constant-negative initial values swept by the neg-init recipe.
pub const NEG_INIT_VALUES: [f64; 4] = [-0.5, -1.0, -2.0, -5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodDispersion {
    pub method: String,
    pub report: DispersionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub method: String,
    pub trial: usize,
    pub grid: LandscapeGrid,
    /// Mean `|Δloss|` within the unit ball.
    pub flatness: f64,
}

/// Grid of the landscape scan, in units of the per-row α norm.
pub const LANDSCAPE_GRID: [f64; 9] = [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub method: String,
    pub trial: usize,
    pub genotype: String,
    pub rank: usize,
    pub regret: f64,
    pub discrepancy_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Summary {
    Skip { rows: Vec<SkipRow> },
    UnfairInit { ground_truth: GroundTruth, rows: Vec<UnfairRow> },
    NegInit { rows: Vec<NegInitRow> },
    Dispersion { methods: Vec<MethodDispersion> },
    Landscape { rows: Vec<LandscapeRow> },
    PcExpectation { model: LinearUnitModel, samples: usize, rows: Vec<ExpectationRow> },
    Oracle { config_hash: String, p10_regret: f64, rows: Vec<OracleRow> },
}

/// Aggregated outcome of one recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub recipe: Recipe,
    pub options: RecipeOptions,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Summary,
}

impl RecipeReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    /// Long-format comparative table.
    pub fn table_csv(&self) -> String {
        let s = |v: &dyn ToString| v.to_string();
        match &self.summary {
            Summary::Skip { rows } => csv_string(
                &["method", "trial", "skip_fraction", "alpha_mean", "alpha_mean_decreasing", "min_gap", "val_acc", "genotype"],
                rows.iter().map(|r| {
                    vec![r.method.clone(), s(&r.trial), s(&r.skip_fraction), s(&r.alpha_mean), s(&r.alpha_mean_decreasing), s(&r.min_gap), s(&r.val_acc), r.genotype.clone()]
                }),
            ),
            Summary::UnfairInit { rows, .. } => csv_string(
                &["method", "trial", "epoch", "argmax", "recovered", "skip_kept"],
                rows.iter().flat_map(|r| {
                    r.argmax.iter().enumerate().map(move |(e, op)| {
                        vec![r.method.clone(), s(&r.trial), s(&e), s(op), s(&r.recovered), s(&r.skip_kept)]
                    })
                }),
            ),
            Summary::NegInit { rows } => csv_string(
                &["init", "trial", "skip_fraction", "genotype"],
                rows.iter().map(|r| vec![s(&r.value), s(&r.trial), s(&r.skip_fraction), r.genotype.clone()]),
            ),
            Summary::Dispersion { methods } => csv_string(
                &["method", "trial", "min_gap"],
                methods.iter().flat_map(|m| m.report.min_gaps.iter().enumerate().map(move |(t, g)| vec![m.method.clone(), s(&t), s(g)])),
            ),
            Summary::Landscape { rows } => csv_string(
                &["method", "trial", "a", "b", "loss", "acc"],
                rows.iter().flat_map(|r| {
                    let g = &r.grid;
                    (0..g.coords.len()).flat_map(move |i| {
                        (0..g.coords.len()).map(move |j| {
                            vec![r.method.clone(), s(&r.trial), s(&g.coords[i]), s(&g.coords[j]), s(&g.loss[i][j]), s(&g.acc[i][j])]
                        })
                    })
                }),
            ),
            Summary::PcExpectation { rows, .. } => csv_string(
                &["quantity", "mc_mean", "std_err", "analytic", "z"],
                rows.iter().map(|r| vec![r.name.clone(), s(&r.mc_mean), s(&r.std_err), s(&r.analytic), s(&r.z)]),
            ),
            Summary::Oracle { rows, .. } => csv_string(
                &["method", "trial", "genotype", "rank", "regret", "discrepancy_gap"],
                rows.iter().map(|r| vec![r.method.clone(), s(&r.trial), r.genotype.clone(), s(&r.rank), s(&r.regret), s(&r.discrepancy_gap)]),
            ),
        }
    }
}

fn report(recipe: Recipe, opts: &RecipeOptions, runs: Vec<RunRecord>, failures: Vec<RunFailure>, summary: Summary) -> RecipeReport {
    RecipeReport { recipe, options: opts.clone(), runs, failures, summary }
}

/// L2 against the default SA pair on the reduced space.
pub fn skip_dominance(opts: &RecipeOptions) -> Result<RecipeReport> {
    let specs = fan_out(&skip_dominance_setup(RegularizerSpec::none()), &[Method::l2(), Method::sa()], opts);
    let (runs, failures) = run_specs(specs, opts.jobs)?;
    let rows = runs.iter().map(SkipRow::of).collect();
    Ok(report(Recipe::SkipDominance, opts, runs, failures, Summary::Skip { rows }))
}

/// The three SA pairs on the reduced space.
pub fn hyperparam_grid(opts: &RecipeOptions) -> Result<RecipeReport> {
    let specs = fan_out(&skip_dominance_setup(RegularizerSpec::none()), &Method::sa_grid(), opts);
    let (runs, failures) = run_specs(specs, opts.jobs)?;
    let rows = runs.iter().map(SkipRow::of).collect();
    Ok(report(Recipe::HyperparamGrid, opts, runs, failures, Summary::Skip { rows }))
}

/// Methods compared by the unfair-init recipe.
pub fn unfair_init_methods() -> Vec<Method> {
    vec![Method::l2(), Method::lse(), Method::new("sa", RegularizerSpec::sa(0.0, std::f64::consts::FRAC_1_SQRT_2)), Method::new("sa_nu0.25_mu1e6", RegularizerSpec::sa(0.25, 1e6))]
}

pub fn unfair_init(opts: &RecipeOptions, methods: &[Method]) -> Result<RecipeReport> {
    let base = unfair_init_setup(RegularizerSpec::none());
    let ground_truth = unfair_ground_truth(&base.for_trial(opts.base_seed, 0))?;
    let (runs, failures) = run_specs(fan_out(&base, methods, opts), opts.jobs)?;
    let rows = runs.iter().map(|r| UnfairRow::of(r, ground_truth.op)).collect::<Result<_>>()?;
    Ok(report(Recipe::UnfairInit, opts, runs, failures, Summary::UnfairInit { ground_truth, rows }))
}

/// L2 from constant-negative initial α.
pub fn neg_init(opts: &RecipeOptions, values: &[f64]) -> Result<RecipeReport> {
    let base = skip_dominance_setup(RegularizerSpec::l2(5e-4));
    let specs = values
        .iter()
        .flat_map(|&v| {
            let mut b = base.clone();
            b.search.alpha_init = AlphaInit::ConstantNegative { value: v };
            (0..opts.trials).map(move |t| RunSpec { id: format!("init{v}-t{t:02}"), method: format!("l2_init{v}"), trial: t, setup: b.for_trial(opts.base_seed, t) })
        })
        .collect();
    let (runs, failures) = run_specs(specs, opts.jobs)?;
    let rows = runs
        .iter()
        .map(|r| {
            let value = match r.spec.setup.search.alpha_init {
                AlphaInit::ConstantNegative { value } => value,
                _ => f64::NAN,
            };
            NegInitRow { value, trial: r.spec.trial, skip_fraction: r.result.skip_fraction, genotype: r.result.genotype.canonical() }
        })
        .collect();
    Ok(report(Recipe::NegInit, opts, runs, failures, Summary::NegInit { rows }))
}

/// Worst-edge top-2 β gaps per method, from already finished runs.
pub fn dispersion_of(runs: &[RunRecord], methods: &[Method]) -> Result<Vec<MethodDispersion>> {
    methods
        .iter()
        .filter_map(|m| {
            let snaps: Vec<ArchParams> = runs.iter().filter(|r| r.spec.method == m.name).map(|r| r.result.arch.clone()).collect();
            (!snaps.is_empty()).then(|| dispersion_report(&snaps).map(|report| MethodDispersion { method: m.name.clone(), report }))
        })
        .collect()
}

/// L2, LSE and SA on the reduced space, compared by final β dispersion.
pub fn dispersion(opts: &RecipeOptions) -> Result<RecipeReport> {
    let methods = [Method::l2(), Method::lse(), Method::sa()];
    let (runs, failures) = run_specs(fan_out(&skip_dominance_setup(RegularizerSpec::none()), &methods, opts), opts.jobs)?;
    let summary = Summary::Dispersion { methods: dispersion_of(&runs, &methods)? };
    Ok(report(Recipe::Dispersion, opts, runs, failures, summary))
}

/// Validation loss around the searched α of L2 and SA runs, w frozen.
pub fn landscape(opts: &RecipeOptions) -> Result<RecipeReport> {
    let methods = [Method::l2(), Method::sa()];
    let mut specs = Vec::new();
    let base = skip_dominance_setup(RegularizerSpec::none());
    for m in &methods {
        let setup = base.clone().with_regularizer(m.regularizer.clone()).for_trial(opts.base_seed, 0);
        specs.push(RunSpec { id: format!("{}-t00", m.name), method: m.name.clone(), trial: 0, setup });
    }
    let (runs, failures) = run_specs(specs, opts.jobs)?;
    let mut rows = Vec::new();
    for r in &runs {
        let setup = &r.spec.setup;
        let topo = setup.space.topology()?;
        let data = setup.data()?;
        // Rebuild the trained supernet: the run keeps α but not w.
        let out = run_search(&setup.search, &topo, &setup.stack, &data)?;
        let net = &out.state.net;
        let grid = landscape_scan(&out.state.arch, &LANDSCAPE_GRID, setup.search.seed, |a| evaluate_network(net, Some(a), &data.val, 256))?;
        rows.push(LandscapeRow { method: r.spec.method.clone(), trial: r.spec.trial, flatness: grid.mean_abs_delta(1.0), grid });
    }
    Ok(report(Recipe::Landscape, opts, runs, failures, Summary::Landscape { rows }))
}

/// Monte-Carlo draws of the partial-channel expectation check.
pub const PC_SAMPLES: usize = 100_000;

pub fn pc_expectation(opts: &RecipeOptions) -> Result<RecipeReport> {
    let model = LinearUnitModel::random(3, 4, opts.base_seed);
    let rows = expectation_check(&model, PC_SAMPLES, opts.base_seed.wrapping_add(1))?;
    Ok(report(Recipe::PcExpectation, opts, vec![], vec![], Summary::PcExpectation { model, samples: PC_SAMPLES, rows }))
}

/// Micro-space searches scored against a tabular benchmark.
pub fn oracle_score(opts: &RecipeOptions, bench: &TabularBenchmark) -> Result<RecipeReport> {
    let methods = [Method::l2(), Method::lse(), Method::sa()];
    let mut base = micro_setup(RegularizerSpec::none());
    base.stack = bench.config.stack.clone();
    base.dataset = bench.config.dataset.clone();
    // The benchmark's held-out split never enters the search; it only
    // scores the supernet against its derived child.
    let (train, held_out) = bench.config.splits()?;
    let specs: Vec<RunSpec> = fan_out(&base, &methods, opts)
        .into_iter()
        .map(|mut spec| {
            spec.setup.dataset.seed = bench.config.dataset.seed;
            spec
        })
        .collect();
    let (runs, failures) = run_specs_with(specs, opts.jobs, |s| run_on(&s.setup, &train, &held_out))?;
    let mut rows = Vec::new();
    for r in &runs {
        let ranking = bench.rank_of(&r.result.genotype)?;
        rows.push(OracleRow {
            method: r.spec.method.clone(),
            trial: r.spec.trial,
            genotype: r.result.genotype.canonical(),
            rank: ranking.rank,
            regret: ranking.regret,
            discrepancy_gap: r.result.discrepancy.map_or(f64::NAN, |d| d.gap),
        });
    }
    let summary = Summary::Oracle { config_hash: bench.config_hash.clone(), p10_regret: bench.regret_percentile(10.0), rows };
    Ok(report(Recipe::OracleScore, opts, runs, failures, summary))
}

/// Search on a fixed pool of samples, split by the setup's seed.
fn run_on(setup: &Setup, pool: &Dataset, held_out: &Dataset) -> Result<RunResult> {
    setup.validate()?;
    let topo = setup.space.topology()?;
    let (train, val) = make_splits(pool, setup.split_fraction, setup.search.seed)?;
    let data = SearchData { train, val };
    let out = run_search(&setup.search, &topo, &setup.stack, &data)?;
    let discrepancy = Some(discrepancy_gap(&out.state.net, &out.state.arch, &out.genotype, held_out, 256)?);
    let skip = skip_fraction(&out.state.arch, &topo, None);
    Ok(RunResult { genotype: out.genotype, skip_fraction: skip, discrepancy, arch: out.state.arch, trace: out.state.trace })
}

/// Builds the default micro benchmark on `jobs` workers.
pub fn build_micro_benchmark(jobs: usize) -> Result<TabularBenchmark> {
    worker_pool(jobs)?.install(|| build_benchmark(&micro_oracle_config()))
}

/// Runs `recipe`; oracle-score builds the default benchmark when none is given.
pub fn run_recipe(recipe: Recipe, opts: &RecipeOptions, bench: Option<&TabularBenchmark>) -> Result<RecipeReport> {
    if opts.trials == 0 && recipe != Recipe::PcExpectation {
        return Err(Error::contract("a recipe needs at least one trial"));
    }
    match recipe {
        Recipe::SkipDominance => skip_dominance(opts),
        Recipe::UnfairInit => unfair_init(opts, &unfair_init_methods()),
        Recipe::NegInit => neg_init(opts, &NEG_INIT_VALUES),
        Recipe::Dispersion => dispersion(opts),
        Recipe::Landscape => landscape(opts),
        Recipe::PcExpectation => pc_expectation(opts),
        Recipe::HyperparamGrid => hyperparam_grid(opts),
        Recipe::OracleScore => match bench {
            Some(b) => oracle_score(opts, b),
            None => oracle_score(opts, &build_micro_benchmark(opts.jobs)?),
        },
    }
}
