//! Two-stage CTR training: absorbing-state discrete diffusion pretraining over
//! `(features, label)` records, then supervised fine-tuning of the same network.

pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod schedule;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
