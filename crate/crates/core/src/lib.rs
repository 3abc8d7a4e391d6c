//! Non-isotropy regularization for proxy-based deep metric learning.
//!
//! The crate provides proxy objectives (ProxyNCA, ProxyNCA++, ProxyAnchor
//! and ProxyNCA in anchor form), a conditional affine-coupling flow that
//! translates class proxies into sample embeddings, the flow-based
//! negative log-likelihood regularizer and combined objective, a small
//! training loop, retrieval and structural metrics, and a synthetic
//! benchmark generator.

pub mod config;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nir;
pub mod synthetic;
pub mod trainer;

pub use error::{NirError, Result};
