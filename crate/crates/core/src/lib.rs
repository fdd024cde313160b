pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod search;
pub mod stage1;
pub mod stage2;
pub mod synth;

pub use error::{Error, Result};
