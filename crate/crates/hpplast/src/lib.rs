//! hp-finite element solver for elastoplasticity with linearly kinematic
//! hardening.
//!
//! The library discretizes the mixed variational formulation of the model
//! problem on quadrilateral meshes with per-element polynomial degrees. The
//! plastic strain lives in a nodal basis at tensor Gauss points; pairing the
//! multiplier with the biorthogonal dual basis decouples its constraints
//! node by node, which turns the discrete problem into a system of
//! nonsmooth equations solved by a semismooth Newton iteration. On top of
//! the solver sit the recovered-multiplier identity, a computable plasticity
//! error, an auxiliary-problem error split, and h/p convergence studies.

pub mod analysis;
pub mod assembly;
pub mod basis1d;
pub mod cli;
pub mod error;
pub mod hp_spaces;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod solver;
pub mod tensors;
pub mod vtk;

pub use error::{Error, Result};
