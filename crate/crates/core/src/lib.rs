#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod heads;
pub mod interaction;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
