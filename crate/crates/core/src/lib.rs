//! Riemannian start/stop decoding of motor imagery from streamed EEG.

pub mod analysis;
pub mod config;
pub mod decoder;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod preprocess;
pub mod recenter;
pub mod session;
pub mod spd;
pub mod synth;

pub use decoder::{ClassPrototypes, DecoderConfig, DecoderId, PosteriorFrame};
pub use error::{Error, Result};
pub use preprocess::{EegFrame, StreamConfig};
pub use recenter::{FixationConfig, RecenterReference, ReferenceKind};
pub use spd::{FrechetConfig, SpdMatrix, SymMatrix};
