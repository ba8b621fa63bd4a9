//! DuMeta++: dual meta-learning of a segmentation encoder and head
//! initialization, with a memory-bank triplet regularizer.

pub mod autodiff;
pub mod config;
pub mod convlab;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod labels;
pub mod losses;
pub mod membank;
pub mod meta;
pub mod network;
pub mod optim;
pub mod params;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{GradMap, ParamSet};
pub use tensor::Tensor;
