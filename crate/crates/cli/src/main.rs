use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoothnas::experiments::{Recipe, RecipeOptions};
use smoothnas_cli::commands::{
    cmd_derive, cmd_eval, cmd_experiment, cmd_oracle_build, cmd_oracle_score, cmd_search, default_out, load_benchmark,
};
use smoothnas_cli::config::RunConfig;
use smoothnas_cli::plot::{plot_data, Figure};
use smoothnas_cli::Result;

#[derive(Parser)]
#[command(name = "smoothnas", version, about = "Differentiable architecture search with smooth-activation regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory; defaults to a subdirectory of $SMOOTHNAS_OUT, else of ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = "SMOOTHNAS_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self, name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default_out(self.out_root.as_deref(), name))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the search described by a config file.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a comparative recipe.
    Experiment {
        #[arg(long)]
        recipe: Recipe,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Benchmark for oracle-score; built on the fly when absent.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-derive the genotype of a run directory and check it.
    Derive { dir: PathBuf },
    /// Train a run's genotype from scratch and report its accuracy.
    Eval {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit a tidy CSV for one figure of a run.
    Plotdata {
        dir: PathBuf,
        #[arg(long)]
        figure: Figure,
        /// Edge (row of the normal α table) for beta-trace.
        #[arg(long, default_value_t = 0)]
        edge: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every genotype of the micro space and store the table.
    OracleBuild {
        #[command(flatten)]
        common: Common,
    },
    /// Score L2, LSE and SA searches against a stored benchmark.
    OracleScore {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn say(dir: &Path, what: &str) {
    println!("{what} written to {}", dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { config, trials, common } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("search").to_string();
            let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| common.out_dir(&stem));
            let m = cmd_search(&cfg, &out, common.seed, common.jobs)?;
            say(&out, &format!("run {}", &m.lineage_id[..12]));
        }
        Command::Experiment { recipe, trials, bench, common } => {
            let opts = RecipeOptions { trials, base_seed: common.seed.unwrap_or(0), jobs: common.jobs };
            let out = common.out_dir(recipe.name());
            let bench = bench.as_deref().map(load_benchmark).transpose()?;
            cmd_experiment(recipe, &opts, &out, bench.as_ref())?;
            say(&out, &format!("{recipe} report"));
        }
        Command::Derive { dir } => println!("{}", cmd_derive(&dir)?.canonical()),
        Command::Eval { dir, seed } => {
            let report = cmd_eval(&dir, seed)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(smoothnas::Error::from)?);
        }
        Command::Plotdata { dir, figure, edge, out } => {
            let csv = plot_data(&dir, figure, edge)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| smoothnas::Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::OracleBuild { common } => {
            let out = common.out_dir("benchmark");
            let m = cmd_oracle_build(&out, common.jobs)?;
            say(&out, &format!("benchmark {}", &m.lineage_id[..12]));
        }
        Command::OracleScore { bench, trials, common } => {
            let opts = RecipeOptions { trials, base_seed: common.seed.unwrap_or(0), jobs: common.jobs };
            let out = common.out_dir("oracle-score");
            cmd_oracle_score(&bench, &opts, &out)?;
            say(&out, "oracle-score report");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
