//! Joint learning of robust control contraction metrics (RCCMs) and
//! tube-certified tracking controllers for disturbed control-affine systems.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: small dense symmetric linear algebra and the sampled
//!   positive-definiteness penalty.
//! - [`autodiff`]: forward-mode duals plus a batched reverse-mode tape whose
//!   primitives can carry input tangents, so losses containing input
//!   Jacobians can be differentiated with respect to network parameters.
//! - [`systems`]: benchmark dynamics (PVTOL, quadrotor, neural lander, two-link
//!   arm) behind a uniform control-affine interface.
//! - [`certnets`]: the metric and controller networks, gain variables, and the
//!   checkpoint file format.
//! - [`certificates`]: certificate matrices and the training loss.
//! - [`training`], [`refinement`], [`verification`], [`simulation`],
//!   [`planner`]: the workflows built on top.

pub mod autodiff;
pub mod certificates;
pub mod certnets;
pub mod config;
pub mod error;
pub mod numerics;
pub mod planner;
pub mod refinement;
pub mod simulation;
pub mod systems;
pub mod training;
pub mod verification;

pub use certnets::{CertificateCheckpoint, ControllerNet, GainParams, MetricNet};
pub use error::{Error, Result};
pub use numerics::{SymMatrix, UnitVectorSet};
pub use systems::{make_system, BoxSet, ControlAffineSystem, OutputSelector, SelectorKind};
