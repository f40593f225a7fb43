//! Image captioning with semantic attention over detected attribute words.
//!
//! A recurrent caption generator receives a global image feature at the
//! first step and, at every later step, attends over a list of attribute
//! words both at its input and at its output. All gradients are derived
//! by hand and verified against central finite differences.

pub mod attention;
pub mod attributes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rnn;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
