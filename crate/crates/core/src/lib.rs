pub mod checkpoint;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod region;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
pub use labels::LabelMap;
pub use tensor::{Graph, Tensor, Var};
