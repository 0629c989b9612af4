//! Compose two unimanual flow-matching policies into a bimanual sampler,
//! steer it with temporal and spatial coordination energies, and spend
//! denoising steps according to the total energy.

mod error;
pub mod composition;
pub mod coordination;
pub mod kinematics;
pub mod numerics;
pub mod policy;
pub mod sampler;
pub mod world;

pub use error::{Error, Result};
