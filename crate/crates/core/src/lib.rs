//! Mixed RT0/P0 finite elements for linearised Poisson–Boltzmann type
//! advection–diffusion–reaction problems with rough (H⁻¹) loads.

// NaN-rejecting guards are written as negated comparisons on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod fem;
pub mod loads;
pub mod mesh;
pub mod postprocess;
pub mod regularizer;
pub mod selftest;
pub mod system;
