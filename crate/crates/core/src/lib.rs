//! Isotropic reconstruction of anisotropic volumes with axial-lateral
//! selective state-space scans.

pub mod checkpoint;
pub mod checks;
pub mod degradation;
pub mod diffcore;
pub mod error;
pub mod layers;
pub mod losses;
pub mod moco;
pub mod network;
pub mod optim;
pub mod reconstruct;
pub mod scanpath;
pub mod ssm;
pub mod train;
pub mod vemm;
pub mod volume;

pub use error::{Error, Result};
