//! Unsupervised digital staining of dark-field microscopy images.

pub mod align;
pub mod checkpoint;
pub mod datagen;
pub mod enhance;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod student;
pub mod teacher;
pub mod train;

pub use error::{Result, StainError};
