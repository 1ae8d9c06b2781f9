//! Config files, run directories and the subcommands of the `smoothnas` binary.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod artifact;
pub mod commands;
pub mod config;
pub mod plot;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] smoothnas::Error),

    #[error("{failed} of {total} runs failed; see {}", dir.display())]
    Failed { failed: usize, total: usize, dir: PathBuf },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        smoothnas::Error::Io { path: path.to_path_buf(), source }.into()
    }

    /// Process exit status: 2 for bad input, 3 for corrupt artifacts,
    /// 4 for partial recipe failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use smoothnas::Error as E;
        match self {
            CliError::Core(E::Schema(_) | E::Contract(_) | E::Catalog(_)) => 2,
            CliError::Core(E::Integrity { .. }) => 3,
            CliError::Failed { .. } => 4,
            CliError::Core(_) => 1,
        }
    }
}
