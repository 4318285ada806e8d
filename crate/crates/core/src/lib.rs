//! Traffic flow forecasting with cycle-based deformable temporal
//! convolutions and spectral/spatial retrieval graph convolutions.
//!
//! The crate carries its own dense `f64` tensor and reverse-mode tape, so
//! every gradient can be checked against finite differences
//! ([`gradcheck`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use graph::{GraphOptions, TrafficGraph, W1Mode};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use spatial::GraphOperators;
pub use tensor::Tensor;

/// Deserializes a TOML or JSON file, chosen by extension (TOML otherwise).
pub fn load_config<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    } else {
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}
