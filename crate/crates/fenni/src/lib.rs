//! Finite element interpolation embedded as a sparse trainable network.
//!
//! Nodal values — and, in the adaptive modes, nodal coordinates — of a
//! finite element mesh are the trainable parameters of an interpolation
//! model. Training minimizes a physics loss (potential energy, strong
//! residual, or weak-form residual) with Adam or L-BFGS; node movement
//! can trigger red-green element splitting, and coarse-to-fine transfer
//! gives a multigrid training schedule. A classical direct FEM solver
//! lives alongside as the verification oracle.

pub mod autodiff;
pub mod gradcheck;
pub mod legacy;
pub mod loss;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod quadrature;
pub mod refelem;
pub mod train;

pub use autodiff::{Tape, Var};
pub use mesh::{Mesh, MeshError, PointLocation};
pub use model::{AdaptMode, FenniModel, ParamSet};
