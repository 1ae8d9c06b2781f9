//! Tidy plot tables from a run directory; rendering is left to the reader.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;
use smoothnas::metrics::LandscapeGrid;
use smoothnas::mixed::beta_of;
use smoothnas::table::csv_string;
use smoothnas::Error;

use crate::artifact::{read_verified, verify};
use crate::config::RunConfig;
use crate::Result;

pub const PLOT_COLUMNS: [&str; 5] = ["figure", "series", "x", "y", "value"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    /// β of every candidate op on one edge, per epoch.
    BetaTrace,
    /// Mean, median and std of α per epoch.
    AlphaStats,
    /// Validation loss over the perturbation grid.
    Landscape,
}

impl Figure {
    pub const ALL: [Figure; 3] = [Figure::BetaTrace, Figure::AlphaStats, Figure::Landscape];

    pub fn name(self) -> &'static str {
        match self {
            Figure::BetaTrace => "beta-trace",
            Figure::AlphaStats => "alpha-stats",
            Figure::Landscape => "landscape",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Figure::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| format!("unknown figure `{s}`"))
    }
}

type Row = [String; 5];

fn row(fig: Figure, series: &str, x: impl ToString, y: Option<f64>, value: f64) -> Row {
    [fig.name().into(), series.into(), x.to_string(), y.map_or_else(String::new, |y| y.to_string()), value.to_string()]
}

/// Trace rows as JSON objects, after checking that each carries `columns`.
fn trace_rows(dir: &Path, columns: &[&str]) -> Result<Vec<serde_json::Map<String, Value>>> {
    let trace: Value = serde_json::from_str(&read_verified(dir, "trace.json")?).map_err(Error::from)?;
    let rows: Vec<_> = trace
        .get("rows")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("trace.json lacks columns: rows".into()))?
        .iter()
        .filter_map(|r| r.as_object().cloned())
        .collect();
    let mut missing: Vec<&str> = columns.iter().copied().filter(|c| rows.iter().any(|r| !r.contains_key(*c))).collect();
    if rows.is_empty() {
        missing = columns.to_vec();
    }
    if !missing.is_empty() {
        return Err(Error::Schema(format!("trace.json lacks columns: {}", missing.join(", "))).into());
    }
    Ok(rows)
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

/// Long-format CSV for `figure`; `edge` picks the row of the normal α table.
pub fn plot_data(dir: &Path, figure: Figure, edge: usize) -> Result<String> {
    verify(dir)?;
    let rows: Vec<Row> = match figure {
        Figure::BetaTrace => {
            let config = RunConfig::parse(&read_verified(dir, "config.toml")?)?;
            let topo = config.space.topology()?;
            let n_ops = topo.ops.len();
            let n_edges = topo.searchable_edges().count();
            if edge >= n_edges {
                return Err(Error::Schema(format!("edge {edge} out of range, the cell has {n_edges} searchable edges")).into());
            }
            let mut out = Vec::new();
            for r in trace_rows(dir, &["epoch", "alpha"])? {
                let alpha: Vec<f64> = r["alpha"].as_array().map(|a| a.iter().map(num).collect()).unwrap_or_default();
                let Some(slice) = alpha.get(edge * n_ops..(edge + 1) * n_ops) else {
                    return Err(Error::Schema(format!("alpha column holds {} entries, edge {edge} needs {}", alpha.len(), (edge + 1) * n_ops)).into());
                };
                for (op, b) in topo.ops.iter().zip(beta_of(slice)) {
                    out.push(row(figure, op.name(), &r["epoch"], None, b));
                }
            }
            out
        }
        Figure::AlphaStats => {
            let cols = [("mean", "alpha_mean"), ("median", "alpha_median"), ("std", "alpha_std")];
            let rows = trace_rows(dir, &["epoch", "alpha_mean", "alpha_median", "alpha_std"])?;
            cols.iter().flat_map(|(series, key)| rows.iter().map(move |r| row(figure, series, &r["epoch"], None, num(&r[*key])))).collect()
        }
        Figure::Landscape => {
            let grid: LandscapeGrid = serde_json::from_str(&read_verified(dir, "landscape.json")?).map_err(Error::from)?;
            let mut out = Vec::new();
            for (i, a) in grid.coords.iter().enumerate() {
                for (j, b) in grid.coords.iter().enumerate() {
                    out.push(row(figure, "loss", a, Some(*b), grid.loss[i][j]));
                }
            }
            out
        }
    };
    Ok(csv_string(&PLOT_COLUMNS, rows))
}
