//! Desk-scale laboratory for subpopulation shift.

pub mod algorithms;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod quantify;
pub mod selection;
pub mod shiftgen;
pub mod trainer;

pub use error::{Error, Result};
