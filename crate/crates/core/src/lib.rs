//! Frequency-domain separation of causal and non-causal feature content,
//! with low-rank token refinement of the causal part, on a small frozen
//! transformer and a synthetic domain-shift segmentation benchmark.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod cten;
pub mod error;
pub mod experiment;
pub mod filtering;
pub mod image;
pub mod spectral;
pub mod synthbench;
pub mod tensor;

pub use adapter::{causal_tune, materialize_tokens, refine, AdapterParams, AdapterShape, RefinementTrace};
pub use error::{Error, FailureClass, Result};
pub use filtering::{build_filter, split, BandPassFilter, CausalSplit, FilterMode};
pub use spectral::{inverse, transform, Backend, FeatureMap, Spectrum};
pub use tensor::Matrix;
