//! Finding, steering and probing language-specific FFN neurons in small decoder models.
//!
//! [`model`] holds the transformer, its tap and intervention hook; [`corpus`] the
//! synthetic languages and classifier; [`lape`] the activation statistics and
//! neuron selection; [`steer`] the intervention plans; [`lens`] the logit lens;
//! [`harness`] the forcing, fallback and eval experiments.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod lape;
pub mod lens;
pub mod linalg;
pub mod model;
pub mod report;
pub mod steer;

pub use error::{Error, Result};
