pub mod assembly;
pub mod bench;
pub mod bank;
pub mod config;
pub mod csm;
pub mod dam;
pub mod error;
pub mod fvsb;
pub mod policies;
pub mod rng;
pub mod runtime;
pub mod synth;
pub mod types;

pub use config::{token_budget, MemoryConfig};
pub use csm::ClusterState;
pub use error::{Error, Result};
pub use types::{FeatureMap, PositionTriplet, Shape, Tier};
