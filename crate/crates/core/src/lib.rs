pub mod adaptor;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gap_analysis;
pub mod inference;
pub mod langmodel;
pub mod metrics;
pub mod nn;
pub mod stack;
pub mod synth;
pub mod tokenizer;
pub mod training;
pub mod vecmath;
pub mod vqa;

pub use error::{MacCapError, Result};
