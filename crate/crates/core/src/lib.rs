#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
