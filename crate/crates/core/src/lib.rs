//! Desk-scale laboratory for power side-channel input recovery on line-buffer
//! CNN accelerators.
//!
//! The crate simulates the first convolution layer of a line-buffer
//! accelerator together with a Hamming-distance power model
//! ([`accel`]), turns per-cycle power into an oscilloscope-like trace
//! ([`chain`]), recovers per-cycle power from such traces ([`extract`]) and
//! runs two input-recovery attacks on the result: background detection
//! ([`attack_bg`]) and power-template reconstruction ([`template`]).
//! [`metrics`] scores recovered images and [`pipeline`] wires the stages
//! together.
//!
//! Signal-processing code is generic over the sample type through
//! [`Scalar`]; the aliases at the crate root pick `f64`, which is what the
//! command-line driver and the acceptance suite use.

pub mod accel;
pub mod attack_bg;
pub mod chain;
mod error;
pub mod extract;
pub mod formats;
pub mod imgio;
pub mod metrics;
pub mod pipeline;
mod scalar;
pub mod seed;
pub mod template;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use accel::{
    AccelConfig, CycleSchedule, Kernel, Masking, ScheduledCycle, Scheduling, SimulatedRun,
};
pub use imgio::{Image, Marker, SilhouetteImage};

/// Per-cycle power vector with `f64` samples.
pub type Powers = accel::CyclePowers<f64>;
/// Sampled trace with `f64` samples.
pub type Trace = chain::RawTrace<f64>;
/// Power template with `f64` feature vectors.
pub type Template = template::PowerTemplate<f64>;
/// Single-precision variants, mostly useful for large corpora.
pub type PowersF32 = accel::CyclePowers<f32>;
pub type TraceF32 = chain::RawTrace<f32>;
