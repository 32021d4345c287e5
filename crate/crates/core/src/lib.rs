//! Single-request inference runtime for small decoder-only transformers
//! on CPU-class edge devices.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod alloc;
pub mod artifact;
pub mod bench;
pub mod config;
pub mod dispatch;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod kv;
pub mod model;
pub mod rng;

pub use config::EngineConfig;
pub use engine::{create_engine, Engine, InferenceRequest, InferenceResponse, RequestStats};
pub use error::{Error, Result};
