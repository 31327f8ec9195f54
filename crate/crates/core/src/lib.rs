//! Maximum-entropy inverse reinforcement learning, density-aware GAN
//! discriminators and adversarial energy-based models on exactly enumerable
//! toy domains.

pub mod cost;
pub mod ebm;
pub mod equivalence;
pub mod error;
pub mod gan;
pub mod gcl;
pub mod gradcheck;
pub mod mdp;
pub mod mixture;
pub mod numeric;
pub mod partition;
pub mod policy;
pub mod rng;

pub use cost::{CostKind, CostModel};
pub use error::{Error, Result};
pub use mdp::{GridConfig, Mdp, Trajectory};
pub use policy::Policy;
pub use rng::SeedTree;
