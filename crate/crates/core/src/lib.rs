//! Relational knowledge distillation for place-recognition descriptors.
//!
//! Students are trained to reproduce the pairwise relations of a frozen
//! (typically cross-modal) teacher. Relations are taken within each model
//! (self-agent) and across teacher and student (cross-agent), and measured in
//! three geometries: Euclidean, cosine and the Poincare ball.
//!
//! * [`numeric`]: matrices, PRNG, finite differences
//! * [`manifold`]: distances, Mobius addition, exponential maps
//! * [`relational`]: relation matrices, scheme losses, objectives, gradients
//! * [`vpr`]: triplet task loss and Recall@K evaluation
//! * [`toy`]: synthetic cross-modal scenes and a small training experiment
//! * [`io`]: text formats for embeddings, ground truth and reports
//! * [`cli`]: the `distilvpr` command-line tool

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod manifold;
pub mod numeric;
pub mod relational;
pub mod toy;
pub mod vpr;

pub use error::{Error, Result};
pub use manifold::{BallPoint, Curvature, DistanceKind};
pub use numeric::{Matrix, RngStream};
pub use relational::{DistillConfig, LossValue, Manifold, Reduction, Scheme, Variant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
