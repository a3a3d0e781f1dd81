//! Simulation of backscatter-assisted distributed beamforming for powering
//! implants in deep tissue.
//!
//! The crate is organised bottom-up: [`channel`] models propagation,
//! [`chirp_dsp`] the carrier waveform and its correlation statistics,
//! [`backscatter`] the passive node, [`sync`] the chirp time alignment,
//! [`beamform`] the one-bit phase alignment loop, [`coldstart`] the wake-up
//! search and [`engine`] ties everything into scenarios.

pub mod backscatter;
pub mod beamform;
pub mod channel;
pub mod chirp_dsp;
pub mod coldstart;
pub mod engine;
pub mod error;
pub mod numeric;
pub mod receiver;
pub mod sync;
pub mod units;

pub use error::{Error, Result};
