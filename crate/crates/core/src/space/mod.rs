//! Search spaces: candidate ops, cell topologies, genotypes and the stacked
//! networks built from them.

mod genotype;
mod network;
mod ops;
mod params;
mod topology;

pub use genotype::{Gene, Genotype};
pub use network::{Network, StackSpec};
pub use ops::{Cost, OpKind, WeightSpec};
pub use params::ParamStore;
pub use topology::{CellTopology, Edge, EdgeRole, SpaceId, DARTS_OPS, NB201_OPS, REDUCED_OPS};
