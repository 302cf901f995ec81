//! Simulation and control library for pose-based tactile servoing.
//!
//! The pipeline: synthesize tactile images from parameterised contacts
//! ([`tactsim`]), collect labelled sliding-contact datasets ([`data`]),
//! train a convolutional pose regressor ([`posenet`]), close the loop around
//! 2D test shapes ([`servo`], [`contours`]) and score the result ([`eval`]).
//! [`experiment`] ties the stages together behind a TOML configuration.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contours;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod par;
pub mod pgm;
pub mod posenet;
pub mod rng;
pub mod servo;
pub mod tactsim;

pub use contours::{Contour, ContourQuery, ShapeKind};
pub use geometry::{FeaturePose, Pose2p5, PoseError, TcpOffset};
pub use tactsim::{ContactParams, SensorFamily, SensorSpec, Task, TactileImage};
