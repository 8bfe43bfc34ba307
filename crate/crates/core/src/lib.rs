//! Two-state spin relaxometry: population model, decay-curve simulation,
//! weighted least-squares fitting and per-pixel widefield rate mapping.
// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curve;
pub mod error;
pub mod fit;
pub mod map;
pub mod model;
pub mod particles;
pub mod pipeline;
pub mod render;
pub mod sim;
pub mod stack;

pub use curve::DecayCurve;
pub use error::{Error, Result};
pub use map::ScalarMap;
pub use stack::{load_stack, Channel, ImageStack};
