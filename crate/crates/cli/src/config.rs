//! The per-run TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothnas::data::DatasetSpec;
use smoothnas::experiments::{Recipe, Setup, SpaceSpec};
use smoothnas::search::SearchConfig;
use smoothnas::space::StackSpec;
use smoothnas::Error;

use crate::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

/// One search, or a recipe when `recipe` is set. The regularizer lives in
/// `search.regularizer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub space: SpaceSpec,
    pub stack: StackSpec,
    pub dataset: DatasetSpec,
    #[serde(default = "half")]
    pub split_fraction: f64,
    pub search: SearchConfig,
    #[serde(default)]
    pub recipe: Option<Recipe>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "one")]
    pub trials: usize,
}

impl RunConfig {
    pub fn from_setup(setup: &Setup) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            space: setup.space.clone(),
            stack: setup.stack.clone(),
            dataset: setup.dataset.clone(),
            split_fraction: setup.split_fraction,
            search: setup.search.clone(),
            recipe: None,
            out: None,
            trials: 1,
        }
    }

    pub fn setup(&self) -> Setup {
        Setup {
            space: self.space.clone(),
            stack: self.stack.clone(),
            dataset: self.dataset.clone(),
            split_fraction: self.split_fraction,
            search: self.search.clone(),
        }
    }

    /// Parses and validates; nothing is computed before this succeeds.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Schema(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Core(Error::Schema(m)) => Error::Schema(format!("{}: {m}", path.display())).into(),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)).into());
        }
        if self.trials == 0 {
            return Err(Error::Schema("trials must be at least 1".into()).into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Schema(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction)).into());
        }
        self.setup().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()).into())
    }
}
