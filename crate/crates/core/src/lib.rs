//! Super-resolution of irregularly-sampled fields with locally-adapted
//! convolutional operators decomposed on constrained dictionaries.
//!
//! A high-resolution field `Y` is reconstructed from a smooth low-resolution
//! analysis `Y_LR`, a correlated high-resolution covariate `X`, and scattered
//! high-resolution point observations:
//!
//! ```text
//! Y = Y_LR + H_Y * Y_LR + H_X * X
//! ```
//!
//! where `H_Y` and `H_X` are small space-time varying convolution masks,
//! written as non-negative, sparse or orthogonal combinations of learned
//! dictionary atoms and calibrated locally from the point observations.

pub mod calib;
pub mod dict;
pub mod error;
pub mod experiment;
pub mod field;
pub mod io;
pub mod linalg;
pub mod oi;
pub mod ossim;
pub mod pipeline;

pub use calib::{build_design, fit_unconstrained, predict_detail, DesignSystem, OperatorPair};
pub use dict::{Coefficients, DictKind, OperatorDictionary};
pub use error::{Error, Result};
pub use field::{
    extract_patch, neighborhood_query, sample_field, upsample, FieldStack, GridSpec,
    NeighborhoodSpec, Observation, Point, TrackObservations,
};
pub use oi::{oi_reconstruct, OiParams};
