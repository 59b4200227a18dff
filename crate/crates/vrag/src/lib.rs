//! Retrieval-grounded response generation at desk scale.
//!
//! The crate trains a generator p(y | z, x) that conditions on a document z
//! retrieved for a dialog context x, together with a dense retriever over a
//! document index. Two training objectives are provided:
//!
//! * `rag`: the log marginal likelihood of the response over the top-k
//!   retrieved documents, with the retrieval distribution renormalized on
//!   that support.
//! * `vrag`: a truncated evidence lower bound that introduces a posterior
//!   retriever conditioned on both context and response; the bound is an
//!   expected log likelihood under the truncated posterior minus a KL
//!   penalty tying the posterior to the prior retriever.
//!
//! Everything is built on a small reverse-mode autodiff tape over f64
//! tensors ([`numerics`]), so the whole pipeline is dependency-light and
//! exactly reproducible from a seed.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
