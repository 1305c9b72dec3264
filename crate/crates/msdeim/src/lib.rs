//! Coarse-grid solvers for nonlinear multiscale PDEs.
//!
//! The crate builds a generalized multiscale finite element (GMsFEM) coarse
//! space offline, hyper-reduces nonlinear residuals and Jacobians with a
//! per-coarse-region empirical interpolation (multiscale DEIM) driven by
//! weighted POD, and solves steady and time-dependent nonlinear problems with
//! Newton's method at a cost proportional to the coarse problem size.
//!
//! The high-level pipeline:
//!
//! ```
//! use msdeim::grid;
//! use msdeim::coeff::PermField;
//! use msdeim::gmsfem;
//!
//! // Fine and coarse grids on the unit square: 4x4 coarse blocks, each
//! // subdivided into 4x4 fine squares.
//! let (mesh, coarse) = grid::build_grids(4, 4).unwrap();
//! let nbhds = grid::build_neighborhoods(&coarse, &mesh);
//! let pu = grid::build_partition_of_unity(&coarse, &mesh);
//!
//! // Homogeneous permeability, two spectral modes per coarse node.
//! let field = PermField::homogeneous(&mesh);
//! let basis = gmsfem::build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, 2).unwrap();
//! assert_eq!(basis.n_coarse(), 2 * coarse.n_nodes());
//! ```
//!
//! See the book under `book/` for a guided tour of the method.

pub mod coeff;
pub mod error;
pub mod fem;
pub mod gmsfem;
pub mod grid;
pub mod harness;
pub mod interp;
pub mod solver;

pub use error::Error;

/// The book's chapters, attached here so every code block in `book/src`
/// compiles and runs with the crate's doc-tests.
#[doc(hidden)]
pub mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/grids.md")]
    pub mod grids {}
    #[doc = include_str!("../../../book/src/coarse-spaces.md")]
    pub mod coarse_spaces {}
    #[doc = include_str!("../../../book/src/interpolation.md")]
    pub mod interpolation {}
    #[doc = include_str!("../../../book/src/solvers.md")]
    pub mod solvers {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
