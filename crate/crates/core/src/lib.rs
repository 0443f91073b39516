//! O-D demand estimation from link flow counts on modularity-partitioned
//! road networks, with user-equilibrium assignment for validation.

pub mod adjustment;
pub mod assignment;
pub mod demand;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod ingest;
pub mod io;
pub mod memory;
pub mod network;
pub mod partition;
pub mod paths;
pub mod routing;
pub mod synth;
pub mod validation;

pub use demand::OdMatrix;
pub use error::{Error, Result};
pub use network::{FlowSampleSet, FlowSnapshot, OdPairSet, RoadNetwork, SuperEdge, SuperNode};
