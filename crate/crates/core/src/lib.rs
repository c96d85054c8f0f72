//! Adam, momentum and plain gradient descent on the Stiefel manifold,
//! together with a small vision transformer whose attention projections are
//! kept orthonormal during training.
//!
//! Optimizer state for a manifold weight is stored in a global tangent
//! space shared by every point of the manifold, so the update and velocity
//! rules are literally the vector-space ones. See [`stiefel`] for the
//! geometry and [`optim`] for the pipeline.

pub mod container;
pub mod data;
pub mod error;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod stiefel;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use network::{ModelParams, TransformerConfig};
pub use optim::{Hyperparameters, Method, Optimizer, WeightKind};
pub use scalar::Real;
pub use stiefel::{HorizontalElement, SectionMatrix, StiefelPoint, TangentVector};
