//! CSI windows, amplitude grids, resampling and dual-dimension tokenisation.

mod embed;
mod resample;
mod tokens;
mod window;

pub use embed::TokenEmbedding;
pub use resample::{design_lowpass, resample, Resampler};
pub use tokens::{make_tokens, Branch, RawTokens, Tfddt};
pub use window::{amplitude, AmplitudeGrid, CsiWindow, CSIT_MAGIC, CSIT_VERSION};
