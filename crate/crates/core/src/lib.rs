// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod classes;
pub mod config;
pub mod error;
pub mod featurizer;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod offline;
pub mod online;
pub mod synth;
pub mod trackdb;
pub mod trainer;
pub mod types;

pub use error::{BottError, Result};
