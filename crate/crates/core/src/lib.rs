pub mod adapters;
pub mod continual;
pub mod costing;
pub mod data;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod metrics;
pub mod replay;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Adam, AdamConfig, ConvConfig, DType, Element, GradMap, Graph, Tensor, Var};
