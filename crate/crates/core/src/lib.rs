pub mod autodiff;
pub mod cli;
pub mod backbone;
pub mod config;
pub mod context;
pub mod corpus;
pub mod error;
pub mod extractors;
pub mod fusion;
pub mod model;
pub mod prosody;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
