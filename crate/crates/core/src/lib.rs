// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-pass information flow routes for decoder-only transformers.

pub mod analysis;
pub mod attribution;
pub mod bench;
pub mod corpus;
pub mod decomposition;
pub mod error;
pub mod model;
pub mod routes;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
