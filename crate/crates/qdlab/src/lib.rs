//! Monte Carlo laboratory for stochastic optimal control of degenerate
//! diffusions in smooth bounded domains.
//!
//! The crate couples a first-exit-time Monte Carlo engine for controlled
//! diffusions with the quasiderivative machinery needed to estimate value
//! functions and their interior directional derivatives pathwise: perturbed
//! processes, first and second quasiderivatives, auxiliary time-change /
//! measure-change / rotation processes, and the barrier functions whose
//! supermartingale property controls quasiderivative moments near the
//! boundary. A finite-difference Bellman solver (Howard policy iteration on
//! monotone stencils) serves as the ground-truth oracle for 1D/2D benchmarks.
//!
//! Modules:
//! - [`geometry`]: domains given by a level function, boundary-layer regions
//! - [`problem`]: controlled diffusion data over a finite control set, with
//!   assumption checkers
//! - [`nondegeneracy`]: the directional nondegeneracy functionals
//! - [`recipe`]: region-switched auxiliary-process recipes
//! - [`engine`]: the coupled path-bundle integrator
//! - [`estimators`]: value and derivative estimators over path bundles
//! - [`verify`]: barrier supermartingale and moment/derivative bound checks
//! - [`oracle`]: grid Bellman solver, interpolated derivatives, uniqueness probe
//! - [`builtins`]: named benchmark problems, domains and experiments
//! - [`config`] / [`runner`]: JSON experiment configs and the execution layer

pub mod builtins;
pub mod config;
pub mod engine;
pub mod estimators;
pub mod geometry;
pub mod linalg;
pub mod nondegeneracy;
pub mod oracle;
pub mod problem;
pub mod recipe;
pub mod runner;
pub mod tables;
pub mod verify;

pub use engine::{Caps, MarkovPolicy, PathBundle, SimSpec};
pub use estimators::Estimate;
pub use geometry::{Domain, Levels, Region};
pub use problem::{ControlProblem, InteriorCondition};

/// Crate version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Numeric vector type used throughout (points, directions, columns).
pub type VecF = nalgebra::DVector<f64>;
/// Numeric matrix type used throughout (diffusion matrices, Hessians).
pub type MatF = nalgebra::DMatrix<f64>;
