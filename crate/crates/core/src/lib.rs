pub mod error;
pub mod aggregation;
pub mod analysis;
pub mod datagen;
pub mod numcore;
pub mod protocol;
pub mod verify;

pub use error::{Error, Result};
