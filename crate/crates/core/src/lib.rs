//! Mel-band RoPE transformer ("Mel-RoFormer") for vocal separation and
//! vocal melody transcription.
//!
//! The model turns a complex spectrogram into K overlapping Mel-scale bands,
//! projects each band to a D-dimensional token, runs alternating time-axis and
//! band-axis transformer encoders over the (K, T) token grid, and maps the
//! result back either to a complex ratio mask (separation) or to onset/frame
//! pitch posteriors (transcription).

pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod melband;
pub mod model;
pub mod notes_io;
pub mod params;
pub mod pipeline;
pub mod roformer;
pub mod train;

pub use error::{CoreError, Result};

use melrof_autograd::Real;

/// Element types usable both by the autograd graph and the FFT.
pub trait Scalar: Real + realfft::FftNum {}

impl Scalar for f32 {}
impl Scalar for f64 {}
