pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub mod ensemble;
pub mod frame;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod warping;

pub use frame::Frame;
pub mod config;
pub use config::{Mode, RunConfig};
