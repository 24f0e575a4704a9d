//! Stacked hourglass pose-estimation networks with lightweight bottleneck
//! variants, implemented from first principles on the CPU.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hourglass;
pub mod pipeline;
pub mod reconcile;
pub mod tensor;

pub use error::{Error, Result};
