//! Training, evaluation, causality audit and latency benchmark for the
//! `tunes` temporal segmentation model.

pub mod ablation;
pub mod audit;
pub mod baseline;
pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod train;

pub use error::{HarnessError, Result};

use tunes::{TunesConfig, TunesModel};

/// Builds a model. Training, evaluation, audit and benchmark all go through here.
pub fn build_model(config: &TunesConfig) -> Result<TunesModel> {
    Ok(TunesModel::new(config.clone())?)
}
