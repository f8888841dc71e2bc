//! Dirichlet-Neumann domain decomposition with reduced-order subdomain
//! solvers and DEIM-based interface transfer on structured Q1 meshes.

pub mod dd_fom;
pub mod error;
pub mod fem;
pub mod harness;
pub mod mesh;
pub mod rom_offline;
pub mod rom_online;
pub mod sparse;

pub use error::{Error, Result, StageExt};
