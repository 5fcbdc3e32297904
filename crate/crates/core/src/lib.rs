//! Channel-token transformer for multivariate time series whose channels are
//! sampled at different rates and may carry block-wise missing intervals.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` arrays with a record-on-execute gradient tape.
//! * [`spectral`]: radix-2 FFT, naive DFT, dominant-frequency detection and
//!   interpolation-distortion analysis.
//! * [`data`]: asynchronous datasets, windowing, missing-block injection,
//!   fill baselines and a seeded synthetic generator.
//! * [`patching`]: frequency-based per-channel patch planning and tokenization.
//! * [`attnmask`]: the unified attention mask over local and channel tokens.
//! * [`model`]: stacked masked-attention blocks and per-period decoders.
//! * [`train`]: channel-aggregated losses, Adam and the early-stopping loop.
//! * [`eval`]: test-time scenarios, naive baselines and frequency-bias metrics.
//! * [`params`]: the flat, named parameter registry.
//! * [`io`]: CSV/JSON dataset files, checkpoints and run directories.

pub mod attnmask;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod params;
pub mod patching;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{CtfError, Result};
