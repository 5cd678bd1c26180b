//! Differential transmitter bias (DTB) calibration and DTB-corrected TDoA
//! positioning.
//!
//! Node hardware delays survive single differencing. Given sessions with a
//! known rover trajectory, [`dtb`] estimates the per-node bias relative to a
//! reference node; [`ekf`] then uses those tables to correct TDoAs inside a
//! planar extended Kalman filter. [`synthetic`] generates sessions with
//! known biases for end-to-end checks.
//!
//! Typical flow:
//!
//! ```no_run
//! use std::path::Path;
//! use tdoa_dtb::{differencing::ReferencePolicy, ekf, ingestion, noise_model, pipeline};
//!
//! let session = ingestion::load_session(
//!     Path::new("toa.csv"),
//!     Path::new("nodes.csv"),
//!     Path::new("traj.csv"),
//!     Default::default(),
//! )?;
//! let cal = pipeline::calibrate(
//!     &session.epochs, &session.catalog, &session.trajectory,
//!     ReferencePolicy::MostVisible, "D5", None,
//! )?;
//! let noise = noise_model::NoiseModel::new(60.0, -110.0)?;
//! let track = ekf::run_filter(&session.epochs, &cal.table, &session.catalog, &noise, &Default::default())?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod differencing;
pub mod dtb;
pub mod ekf;
pub mod geometry;
pub mod ingestion;
pub mod metrics;
pub mod noise_model;
pub mod pipeline;
pub mod synthetic;
mod table;

pub use geometry::{NodeCatalog, NodeId, Position};
pub use table::ParseError;
