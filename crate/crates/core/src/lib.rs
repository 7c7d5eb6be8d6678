//! Pressure-induced deformation correction for robotic ultrasound sweeps.
//!
//! The crate is organised around the processing chain:
//!
//! * [`calibration`] maps image pixels into the probe and world frames.
//! * [`io`] reads and writes sweep recordings (manifest, graymaps, log table).
//! * [`simulator`] synthesises palpations and sweeps over a ground-truth phantom.
//! * [`optical_flow`] tracks speckle features with pyramidal Lucas-Kanade.
//! * [`stiffness`] fits the quadratic force/indentation law and dynamic stiffness.
//! * [`regression`] fits the coupled second-order displacement model with ADAM.
//! * [`propagation`] blends sampled stiffness along the trajectory and rebinds the model.
//! * [`correction`] turns a bound model into a dense field and resamples frames.
//! * [`compounding`] splats frames into a voxel volume.
//! * [`metrics`] segments vessels and scores dice, centroid offset and area.
//! * [`pipeline`] runs the whole chain from a single configuration file.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default). Every parallel path has a sequential twin selected through
//! [`Exec`], and both produce bit-identical output.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod compounding;
pub mod correction;
pub mod error;
pub mod exec;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod optical_flow;
pub mod pipeline;
pub mod propagation;
pub mod regression;
pub mod simulator;
pub mod stiffness;

pub use calibration::{CalibrationParams, PixelCoord, Pose};
pub use error::{Error, LoadError, Result};
pub use exec::Exec;
pub use io::{Frame, RecordingKind, SweepManifest, SweepRecording};
pub use regression::DisplacementRegression;
pub use stiffness::StiffnessModel;
