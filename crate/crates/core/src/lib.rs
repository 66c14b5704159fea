//! Indoor 3D object detection with graph reasoning over proposals, gated
//! point/image fusion and cascaded box refinement, built on a small set of
//! hand-differentiated kernels.

pub mod acmt;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod geometry3d;
pub mod gradsuite;
pub mod grm;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
