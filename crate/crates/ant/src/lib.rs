//! Adaptive neural trees: binary trees whose internal nodes route samples,
//! whose edges transform features, and whose leaves predict. Trees are grown
//! greedily to fit the data, then refined globally by gradient descent.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod model_io;
pub mod module;
pub mod run;
pub mod tensor;
#[cfg(test)]
pub mod testkit;
pub mod train;

use thiserror::Error;

/// Library-wide error type. The CLI maps variants onto exit codes:
/// usage/config problems, data problems, and training failures are distinct.
#[derive(Debug, Error)]
pub enum AntError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model file error: {0}")]
    Model(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl AntError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AntError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, AntError>;
