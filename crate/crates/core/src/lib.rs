//! Self-distilled monocular 3D localization on synthetic scenes.

pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod scenes;
pub mod strategy;
pub mod tensor_io;
pub mod trainer;

pub use error::{CoreError, Result};
