pub mod connectivity;
pub mod data;
pub mod ensemble;
pub mod episim;
pub mod error;
pub mod neural;
pub mod pipeline;
pub mod quantiles;
pub mod scoring;

pub use error::{Error, Result};
