pub mod dataset;
pub mod error;
pub mod graph_builder;
pub mod mi;
pub mod model;
pub mod ot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
