//! 2D solver library for the coupled miscible-displacement model
//! (pressure/Darcy/concentration) built on gradient discretisations and
//! characteristic (ELLAM) transport.
//!
//! Main pieces:
//! - [`mesh`]: polytopal meshes, diamond sub-mesh, geometric queries;
//! - [`gdm`]: the gradient-discretisation abstraction (dof spaces,
//!   reconstruction operators, norms, quality functionals);
//! - [`hmm`], [`fe`]: concrete discretisations (hybrid mimetic mixed,
//!   conforming P1, lowest-order Raviart-Thomas mixed);
//! - [`darcy`]: H(div) velocity reconstruction from face fluxes;
//! - [`flow`]: exact characteristic tracking for piecewise-RT0 velocities;
//! - [`scheme`]: the coupled pressure/concentration time loop;
//! - [`linalg`]: self-contained sparse CG solvers;
//! - [`harness`]: convergence studies, invariant suites, report emission.

pub mod darcy;
pub mod fe;
pub mod flow;
pub mod gdm;
pub mod geom;
pub mod harness;
pub mod hmm;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod scheme;

pub use geom::{Point, Vec2};
