pub mod augmentation;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gssl;
pub mod model;
pub mod mssl;
pub mod numerics;
pub mod seed;

pub use error::{Error, Result};
