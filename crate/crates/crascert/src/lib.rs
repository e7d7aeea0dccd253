pub mod error;
pub mod expect;
pub mod parse;
pub mod poly;
pub mod quad;
pub mod sdp;
pub mod sets;
pub mod sos;
pub mod spec;
pub mod synth;
pub mod validate;

pub use error::{Error, Result};
pub use poly::Poly;

/// Concrete coefficient type used throughout the pipeline.
pub type Polynomial = Poly<f64>;
