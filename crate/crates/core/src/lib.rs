pub mod batch;
pub mod conditioners;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod trainer;

pub use batch::ImageBatch;
pub use error::{Error, Result};
pub use model::CcfModel;
