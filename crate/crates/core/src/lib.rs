//! Training-and-evaluation harness comparing adversarially trained and
//! supervised segmentation models for organs-at-risk in thoracic CT slices.
//!
//! The crate is organized around the lifecycle of a segmentation experiment:
//!
//! - [`volume`], [`io`], [`dataset`], [`phantom`]: CT/label ingestion,
//!   Hounsfield windowing, patient-level splits, and a deterministic
//!   synthetic phantom dataset for desk-scale runs.
//! - [`autodiff`], [`models`]: a small reverse-mode tape over `ndarray`
//!   (f64 end to end) plus the U-Net generator, the three critic designs
//!   (product / early fusion / late fusion), and a squeeze-excitation
//!   residual U-Net baseline.
//! - [`adversarial`]: critic input encodings and the composite
//!   BCE-minus-critic-gap generator loss.
//! - [`optim`], [`trainer`]: Adam, the plateau learning-rate schedule,
//!   early stopping, and the supervised/adversarial epoch loops.
//! - [`metrics`], [`ensemble`]: volume-wise Dice, per-slice HD95 averaged
//!   per patient, and multi-class fusion of six binary models by logit
//!   argmax.
//! - [`report`], [`overlay`], [`experiment`]: table rendering, Fig-style
//!   prediction overlays, and the config-driven experiment grid runner.

pub mod adversarial;
pub mod autodiff;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod organs;
pub mod overlay;
pub mod phantom;
pub mod report;
pub mod trainer;
pub mod volume;

pub use error::{OarsegError, Result};
pub use organs::OrganId;
