pub mod binio;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod datakit;
pub mod encoder;
pub mod frontend;
pub mod model;
pub mod msfn;
pub mod plot;
pub mod pose;
pub mod skeleton;
pub mod train;
