pub mod aggregation;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod normlayers;
pub mod numcore;

pub use error::{Error, Result};
