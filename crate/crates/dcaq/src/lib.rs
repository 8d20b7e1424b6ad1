//! Double-channel convolutional network for image-based air quality
//! measurement.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`autodiff`]) on top of which the double-channel network ([`net`]),
//! the data pipeline ([`data`]), the two-phase trainer ([`train`]),
//! test-time-augmented inference ([`infer`]) and the evaluation metrics
//! ([`metrics`]) are built.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod net;
#[doc(hidden)]
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
