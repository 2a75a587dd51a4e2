//! Graph pyramid hierarchical parsing and cross-dataset mutual learning on a
//! small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gpm;
pub mod gradcheck;
mod layers;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod mutual;
pub mod netpbm;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::LabelMap;
pub use tape::{Tape, Var};
pub use taxonomy::{Level, Taxonomy};
pub use tensor::Tensor;
