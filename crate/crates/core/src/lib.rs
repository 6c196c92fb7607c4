//! Inference and verification engine for a hybrid state-space / transformer
//! all-in-one image restoration network.

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod degrade;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod prompt;
pub mod ssm;
pub mod suite;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use grad::{Gradients, Tape, Var};
pub use network::{Network, NetworkConfig};
pub use params::{Init, Initializer, Param, ParamReader, ParamSource};
pub use tensor::{Scalar, Shape, Tensor};
pub use weights::{DType, WeightStore};
