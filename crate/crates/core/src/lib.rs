//! Multi-phase image segmentation with a local variance force term.
//!
//! The pipeline is: load (and optionally lift RGB to RGB+Lab), initialize with
//! Multi-IGLIM edge clustering, then run the ICTM-LVF convolution-thresholding
//! loop until no pixel changes.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod fidelity;
pub mod field;
pub mod iglim;
pub mod image;
pub mod kernel;
pub mod solver;

pub use error::{Result, SegError};
pub use field::Field;
pub use image::{ImageField, Partition};
pub use kernel::{KernelSpec, PeriodicConvolver};
