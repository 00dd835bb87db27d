//! Semi-supervised rotation regression on SO(3).
//!
//! A small, fully self-contained stack: rotation math ([`so3`]), the matrix
//! Fisher distribution ([`fisher`]), curriculum pseudo-label selection
//! ([`curriculum`]), mosaic augmentation ([`augment`]), a tiny convolutional
//! regressor with hand-written gradients ([`model`]), a synthetic rendered
//! dataset ([`data`]), the student/teacher training loop ([`trainer`]) and
//! evaluation ([`metrics`]).

pub mod error;
pub mod fisher;
pub mod so3;
pub mod curriculum;
pub mod augment;
pub mod model;
pub mod data;
pub mod metrics;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
