//! Certified simulation-gap quantification and symbolic controller synthesis
//! for discrete-time systems.
//!
//! The pipeline: cover the state/input boxes with epsilon-nets, collect
//! paired transitions from a nominal model and a surrogate simulator, train a
//! Lipschitz-certified network upper-bounding the per-coordinate gap on the
//! samples, inflate the bound to the continuum with the covering radii and
//! estimated Lipschitz constants, and synthesize symbolic controllers for the
//! resulting uncertain system.

pub mod certificate;
pub mod config;
pub mod covering;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod lipestimate;
pub mod lipnet;
pub mod pipeline;
pub mod symctrl;
pub mod trainer;

pub use error::{Result, SimGapError};
