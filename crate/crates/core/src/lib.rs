//! Probabilistic PCA for data on the torus.
//!
//! Angles are modelled as the wrap onto [0, 2π)^D of a Gaussian probabilistic
//! PCA model. Fitting alternates between choosing integer winding numbers
//! for every observation and refitting the Euclidean model on the unwrapped
//! points.

pub mod error;
pub mod lattice;
pub mod linalg;
pub mod model_selection;
pub mod persist;
pub mod ppca;
pub mod simulation;
pub mod tppca;
pub mod wrapped_normal;

pub use nalgebra;

pub use error::{Error, Result};
pub use lattice::LatticeSpec;
pub use ppca::{ppca_closed_form, ppca_em, EmOptions, PpcaModel};
pub use tppca::{tppca_fit, TppcaConfig, TppcaFit};
pub use wrapped_normal::{wrap, AngleMatrix, CemOptions, WrapIndices, WrappedNormal};
