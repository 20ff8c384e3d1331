pub mod basis;
pub mod cli;
pub mod control;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod global;
pub mod inference;
pub mod local;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod study;

pub use error::{Error, Result};
