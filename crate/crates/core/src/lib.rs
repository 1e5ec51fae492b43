#![no_std]

extern crate alloc;

pub mod classifiers;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod recurrent;
pub mod tensor;
pub mod translator;

pub use error::{Error, Result};
pub use tensor::Tensor;
