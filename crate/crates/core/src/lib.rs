//! Plane pose regression for 2D slices of 3D volumes.
//!
//! The crate is organized bottom-up:
//!
//! - [`geom`]: rotation parameterizations and the reference-plane transform
//! - [`volume`]: phantom volumes, slice sampling and augmentation
//! - [`net`]: a small reverse-mode autodiff engine, the convolutional
//!   backbone and the multi-head pose predictor
//! - [`losses`]: Gaussian NLL, MSE and the evidential NIG loss
//! - [`ensemble`]: head fusion, deep ensembles and MC-dropout inference
//! - [`metrics`]: ED, PA, MSE, NCC and SSIM
//! - [`harness`]: configuration, training, evaluation and prediction

// `!(x > eps)` deliberately treats NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Indexed loops read closer to the coordinate-wise formulas.
#![allow(clippy::needless_range_loop)]

pub mod ensemble;
pub mod error;
pub mod geom;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod volume;

pub use ensemble::{EnsemblePrediction, HeadPrediction, Prediction};
pub use error::{Error, Result};
pub use geom::{
    AxisAngle, EulerAngles, PlanePose, Quaternion, RotationMatrix, RotationParam, SimTransform,
    GRID_HALF_EXTENT,
};
pub use net::{HeadKind, Method, Model, ModelConfig};
pub use volume::{AugmentConfig, SliceImage, Volume};
