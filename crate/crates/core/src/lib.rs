//! Second-order total-variation regularization for image denoising.
//!
//! The crate covers discrete differential operators on a uniform pixel grid
//! ([`grid`]), the energies of TV, TGV², non-symmetric TGV², the L^q variant
//! TGV^{2,q}_0 and ICTV ([`energy`]), one primal-dual engine that minimizes
//! every model ([`solver`]), measurement instruments ([`analysis`]) and the
//! parameter-sweep studies built on top of them ([`experiments`]).

pub mod analysis;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod pgm;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField, SymTensorField, TensorField, VectorField};
