pub mod acceptance;
pub mod connectivity;
pub mod error;
pub mod experiments;
pub mod genealogy;
pub mod grid;
pub mod gw_exact;
pub mod stats;
pub mod laws;
pub mod rng;
pub mod sbm;

pub use error::{Error, Result};
pub use laws::{DisplacementLaw, Mode, ModelParams, OffspringLaw, Regime, ThinnedLaw};
pub use rng::{StreamKey, Tag};
