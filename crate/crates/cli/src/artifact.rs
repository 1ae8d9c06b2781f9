//! Run directories and their hash manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smoothnas::experiments::{LandscapeRow, RunResult, Setup};
use smoothnas::metrics::{alpha_stats, edge_dispersion};
use smoothnas::table::csv_string;
use smoothnas::Error;

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Search,
    Experiment,
    Benchmark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub engine_version: String,
    pub kind: ArtifactKind,
    pub lineage_id: String,
    /// Relative path to SHA-256 of every file in the directory.
    pub files: BTreeMap<String, String>,
    /// Child run directories and the lineage id each was created with.
    #[serde(default)]
    pub runs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects files and their hashes, then seals the directory with a manifest.
pub struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
    runs: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), files: BTreeMap::new(), runs: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes.as_ref()).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes.as_ref()));
        Ok(())
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        self.put(name, text)
    }

    pub fn child(&mut self, name: &str, manifest: &Manifest) {
        self.runs.insert(name.to_string(), manifest.lineage_id.clone());
    }

    pub fn seal(self, kind: ArtifactKind, lineage_id: String) -> Result<Manifest> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            engine_version: smoothnas::VERSION.to_string(),
            kind,
            lineage_id,
            files: self.files,
            runs: self.runs,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Reads a manifest and checks every hash it lists, recursing into child runs.
pub fn verify(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity { path: path.clone(), detail: format!("unreadable manifest: {e}") })?;
    for (name, want) in &manifest.files {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|e| CliError::io(&file, e))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(Error::Integrity { path: file, detail: format!("sha256 {got}, manifest says {want}") }.into());
        }
    }
    for (name, lineage) in &manifest.runs {
        let child = verify(&dir.join(name))?;
        if &child.lineage_id != lineage {
            return Err(Error::Integrity { path: dir.join(name), detail: format!("lineage {} is not {lineage}", child.lineage_id) }.into());
        }
    }
    Ok(manifest)
}

pub fn read_verified(dir: &Path, name: &str) -> Result<String> {
    let manifest = verify(dir)?;
    if !manifest.files.contains_key(name) {
        return Err(Error::Schema(format!("{} has no {name}", dir.display())).into());
    }
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))
}

/// Content-derived id of a search: the hash of its resolved config.
pub fn search_lineage(config_toml: &str) -> String {
    sha256_hex(format!("search\n{config_toml}").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub genotype: String,
    pub skip_fraction: f64,
    pub discrepancy: Option<smoothnas::metrics::Discrepancy>,
    pub final_val_acc: Option<f64>,
}

/// Writes one search run: config copy, trace, genotype, α and reports.
pub fn write_run(dir: &Path, setup: &Setup, result: &RunResult, landscape: Option<&LandscapeRow>) -> Result<Manifest> {
    let config = RunConfig::from_setup(setup).to_toml()?;
    let mut w = ArtifactWriter::create(dir)?;
    w.put("config.toml", &config)?;
    w.put("trace.csv", result.trace.to_csv())?;
    w.put_json("trace.json", &result.trace)?;
    w.put_json("genotype.json", &result.genotype)?;
    w.put_json("arch.json", &result.arch)?;
    w.put_json(
        "result.json",
        &ResultSummary {
            genotype: result.genotype.canonical(),
            skip_fraction: result.skip_fraction,
            discrepancy: result.discrepancy,
            final_val_acc: result.trace.rows.last().map(|r| r.val_acc),
        },
    )?;
    let stats = alpha_stats(&result.trace);
    w.put(
        "alpha_stats.csv",
        csv_string(
            &["epoch", "mean", "median", "std"],
            stats.iter().map(|(e, s)| [e.to_string(), s.mean.to_string(), s.median.to_string(), s.std.to_string()]),
        ),
    )?;
    w.put_json("dispersion.json", &edge_dispersion(&result.arch))?;
    if let Some(l) = landscape {
        w.put_json("landscape.json", &l.grid)?;
    }
    w.seal(ArtifactKind::Search, search_lineage(&config))
}
