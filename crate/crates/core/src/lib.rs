//! TUNeS: a temporal U-Net with self-attention at its coarsest stage, for
//! frame-wise phase recognition on sequences of visual feature vectors.
//!
//! The crate contains the causal operator toolkit ([`ops`]), masked attention
//! ([`attention`]), the full encoder–bottleneck–decoder model ([`model`]), the
//! multi-scale training objective ([`objectives`]), data handling
//! ([`data`]) and evaluation metrics ([`metrics`]).

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod probe;

pub use error::{Result, TunesError};
pub use model::{MultiScalePredictions, TunesConfig, TunesModel};
