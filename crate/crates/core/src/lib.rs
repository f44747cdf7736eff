//! Two-level overlapping Schwarz solver for the pressure system of Darcy flow
//! on structured grids, with spectral coarse spaces built from local
//! generalized eigenproblems.

pub mod assembly;
pub mod harness;
pub mod krylov;
pub mod media;
pub mod mesh;
pub mod precond;
pub mod sparse;
pub mod spectral;
pub mod verify;
