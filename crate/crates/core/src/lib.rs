//! Event-camera recognition toolkit.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`codec`] decodes ATIS `.bin`, AEDAT 2.0 and the portable `.evt`
//!    format into validated [`event::EventStream`]s.
//! 2. [`representation`] slices a stream into `T` equal-count segments and
//!    integrates each one into a two-channel (OFF/ON) count frame.
//! 3. [`nn`], [`attention`] and [`model`] implement a VGG network with CBAM
//!    attention, forward and backward, on a small dense [`tensor::Tensor`].
//! 4. [`train`] fits the network with Adam and cross-entropy and reports
//!    top-1 accuracy; [`accounting`] gives analytic parameter/FLOP tables.
//!
//! Heavy loops run on rayon when the `parallel` feature is enabled (the
//! default). Every reduction is done in a fixed order, so results are
//! bit-identical whatever the thread count.

pub mod accounting;
pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod event;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod representation;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use event::{Event, EventStream, Polarity, SensorGeometry, StreamStats};
pub use tensor::Tensor;
