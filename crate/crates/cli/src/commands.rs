use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothnas::derive::derive;
use smoothnas::experiments::{
    build_micro_benchmark, child_train_spec, run_recipe, run_specs, LandscapeRow, Recipe, RecipeOptions, RecipeReport, RunSpec, Summary,
};
use smoothnas::mixed::ArchParams;
use smoothnas::oracle::{train_discrete, TabularBenchmark};
use smoothnas::space::Genotype;
use smoothnas::table::csv_string;
use smoothnas::Error;

use crate::artifact::{read_verified, sha256_hex, verify, write_run, ArtifactKind, ArtifactWriter, Manifest, ResultSummary};
use crate::config::RunConfig;
use crate::{CliError, Result};

pub const BENCHMARK_FILE: &str = "benchmark.json";

/// Runs the configured search, or its recipe when one is named.
///
/// One trial writes straight into `out`; more trials write `trial-NN`
/// subdirectories seeded `base_seed + NN` under a parent manifest.
pub fn cmd_search(cfg: &RunConfig, out: &Path, seed: Option<u64>, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    if let Some(recipe) = cfg.recipe {
        let opts = RecipeOptions { trials: cfg.trials, base_seed: seed.unwrap_or(cfg.search.seed), jobs };
        return cmd_experiment(recipe, &opts, out, None);
    }
    let base_seed = seed.unwrap_or(cfg.search.seed);
    let setup = cfg.setup();
    if cfg.trials == 1 {
        let result = setup.for_trial(base_seed, 0).run()?;
        return write_run(out, &setup.for_trial(base_seed, 0), &result, None);
    }
    let specs: Vec<RunSpec> = (0..cfg.trials)
        .map(|t| RunSpec { id: format!("trial-{t:02}"), method: "config".into(), trial: t, setup: setup.for_trial(base_seed, t) })
        .collect();
    let (runs, failures) = run_specs(specs, jobs)?;
    let mut w = ArtifactWriter::create(out)?;
    w.put("config.toml", cfg.to_toml()?)?;
    for r in &runs {
        let m = write_run(&w.dir().join(&r.spec.id), &r.spec.setup, &r.result, None)?;
        w.child(&r.spec.id, &m);
    }
    let lineage = sha256_hex(format!("trials\n{base_seed}\n{}", cfg.to_toml()?).as_bytes());
    w.put_json("failures.json", &failures)?;
    let manifest = w.seal(ArtifactKind::Search, lineage)?;
    if !failures.is_empty() {
        return Err(CliError::Failed { failed: failures.len(), total: cfg.trials, dir: out.to_path_buf() });
    }
    Ok(manifest)
}

/// What `report.json` keeps of a recipe: everything but the raw runs, which
/// live in their own directories.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub recipe: Recipe,
    pub options: RecipeOptions,
    pub runs: Vec<String>,
    pub failures: Vec<FailedCell>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub id: String,
    pub method: String,
    pub trial: usize,
    pub error: String,
}

pub fn experiment_lineage(recipe: Recipe, opts: &RecipeOptions, bench_hash: Option<&str>) -> String {
    sha256_hex(format!("experiment\n{recipe}\n{}\n{}\n{}\n{}", opts.trials, opts.base_seed, bench_hash.unwrap_or("-"), smoothnas::VERSION).as_bytes())
}

/// Runs a recipe and writes one directory per run plus the comparative report.
pub fn cmd_experiment(recipe: Recipe, opts: &RecipeOptions, out: &Path, bench: Option<&TabularBenchmark>) -> Result<Manifest> {
    let built;
    let bench = match (recipe, bench) {
        (Recipe::OracleScore, None) => {
            built = build_micro_benchmark(opts.jobs)?;
            Some(&built)
        }
        (_, b) => b,
    };
    let report = run_recipe(recipe, opts, bench)?;
    write_report(&report, out, bench)
}

fn write_report(report: &RecipeReport, out: &Path, bench: Option<&TabularBenchmark>) -> Result<Manifest> {
    let mut w = ArtifactWriter::create(out)?;
    let landscapes: Vec<&LandscapeRow> = match &report.summary {
        Summary::Landscape { rows } => rows.iter().collect(),
        _ => vec![],
    };
    for r in &report.runs {
        let land = landscapes.iter().copied().find(|l| l.method == r.spec.method && l.trial == r.spec.trial);
        let m = write_run(&w.dir().join("runs").join(&r.spec.id), &r.spec.setup, &r.result, land)?;
        w.child(&format!("runs/{}", r.spec.id), &m);
    }
    let failures: Vec<FailedCell> = report
        .failures
        .iter()
        .map(|f| FailedCell { id: f.spec.id.clone(), method: f.spec.method.clone(), trial: f.spec.trial, error: f.error.clone() })
        .collect();
    let file = ReportFile {
        recipe: report.recipe,
        options: report.options.clone(),
        runs: report.runs.iter().map(|r| r.spec.id.clone()).collect(),
        failures: failures.clone(),
        summary: report.summary.clone(),
    };
    w.put_json("report.json", &file)?;
    w.put("table.csv", report.table_csv())?;
    if !failures.is_empty() {
        w.put(
            "failures.csv",
            csv_string(&["id", "method", "trial", "error"], failures.iter().map(|f| [f.id.clone(), f.method.clone(), f.trial.to_string(), f.error.clone()])),
        )?;
    }
    let manifest = w.seal(ArtifactKind::Experiment, experiment_lineage(report.recipe, &report.options, bench.map(|b| b.config_hash.as_str())))?;
    if !failures.is_empty() {
        return Err(CliError::Failed { failed: failures.len(), total: failures.len() + report.runs.len(), dir: out.to_path_buf() });
    }
    Ok(manifest)
}

/// Builds the default micro benchmark into `out`.
pub fn cmd_oracle_build(out: &Path, jobs: usize) -> Result<Manifest> {
    let bench = build_micro_benchmark(jobs)?;
    let mut w = ArtifactWriter::create(out)?;
    w.put_json(BENCHMARK_FILE, &bench)?;
    let best = bench.best_acc();
    w.put(
        "benchmark.csv",
        csv_string(
            &["rank", "genotype", "mean_acc", "std_acc", "regret", "param_count"],
            bench.ordered().iter().enumerate().map(|(i, k)| {
                let r = &bench.rows[*k];
                [(i + 1).to_string(), k.to_string(), r.mean_acc.to_string(), r.std_acc.to_string(), (best - r.mean_acc).to_string(), r.param_count.to_string()]
            }),
        ),
    )?;
    w.seal(ArtifactKind::Benchmark, bench.config_hash.clone())
}

/// A benchmark from an `oracle-build` directory (hash-checked) or a bare JSON file.
pub fn load_benchmark(path: &Path) -> Result<TabularBenchmark> {
    if path.is_dir() {
        verify(path)?;
        Ok(TabularBenchmark::load(&path.join(BENCHMARK_FILE))?)
    } else {
        Ok(TabularBenchmark::load(path)?)
    }
}

pub fn cmd_oracle_score(bench: &Path, opts: &RecipeOptions, out: &Path) -> Result<Manifest> {
    let bench = load_benchmark(bench)?;
    cmd_experiment(Recipe::OracleScore, opts, out, Some(&bench))
}

struct StoredRun {
    config: RunConfig,
    arch: ArchParams,
    genotype: Genotype,
}

fn load_run(dir: &Path) -> Result<StoredRun> {
    let config = RunConfig::parse(&read_verified(dir, "config.toml")?)?;
    let arch: ArchParams = serde_json::from_str(&read_verified(dir, "arch.json")?).map_err(Error::from)?;
    let genotype: Genotype = serde_json::from_str(&read_verified(dir, "genotype.json")?).map_err(Error::from)?;
    Ok(StoredRun { config, arch, genotype })
}

/// Re-derives the genotype from the stored α and checks it against the stored one.
pub fn cmd_derive(dir: &Path) -> Result<Genotype> {
    let run = load_run(dir)?;
    let topo = run.config.space.topology()?;
    let reduce = run.config.space.reduce_topology();
    let g = derive(&run.arch, &topo, reduce.as_ref(), run.config.search.selection)?;
    if g != run.genotype {
        return Err(Error::Integrity {
            path: dir.join("genotype.json"),
            detail: format!("stored {} but α derives {}", run.genotype.canonical(), g.canonical()),
        }
        .into());
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genotype: String,
    pub seed: u64,
    pub steps: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub param_count: usize,
    /// Supernet against inherited-weight child, recorded at search time.
    pub discrepancy_gap: Option<f64>,
}

/// Trains the stored genotype from scratch on the run's own splits.
pub fn cmd_eval(dir: &Path, seed: Option<u64>) -> Result<EvalReport> {
    let run = load_run(dir)?;
    let summary: ResultSummary = serde_json::from_str(&read_verified(dir, "result.json")?).map_err(Error::from)?;
    let setup = run.config.setup();
    let topo = setup.space.topology()?;
    let data = setup.data()?;
    let spec = child_train_spec(&setup, data.train.len());
    let seed = seed.unwrap_or(setup.search.seed);
    let out = train_discrete(&run.genotype, &topo, &setup.stack, &data.train, &data.val, &spec, seed)?;
    Ok(EvalReport {
        genotype: run.genotype.canonical(),
        seed,
        steps: spec.steps,
        val_loss: out.val_loss,
        val_acc: out.val_acc,
        param_count: out.param_count,
        discrepancy_gap: summary.discrepancy.map(|d| d.gap),
    })
}

/// Where outputs go when neither `--out` nor the config names a directory.
pub fn default_out(root: Option<&Path>, name: &str) -> PathBuf {
    root.map_or_else(|| PathBuf::from("runs"), Path::to_path_buf).join(name)
}
