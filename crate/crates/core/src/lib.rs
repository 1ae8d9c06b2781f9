//! Differentiable architecture search with smooth-activation regularization
//! of the architecture weights, on a small self-contained autograd engine.

pub mod data;
pub mod derive;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod mixed;
pub mod optim;
pub mod oracle;
pub mod pc_model;
pub mod regularizers;
pub mod search;
pub mod space;
pub mod table;
pub mod tensor;

pub use error::{Error, Result};

/// Engine version recorded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
