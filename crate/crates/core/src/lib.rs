pub mod cli;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use graph::{LayerGraph, Mode};
pub use tensor::{Scalar, Shape4, Tensor};
pub use topology::{build_network, HeadKind, NetworkConfig};
