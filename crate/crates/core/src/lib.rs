//! Jointly learned dynamics models, robust full-state observers and
//! incremental input-to-state stability (δISS) Lyapunov certificates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod certify;
pub mod config;
pub mod diffcore;
pub mod distributed;
pub mod error;
pub mod nets;
pub mod pipeline;
pub mod plants;
pub mod system;
pub mod training;

pub use error::{Error, Result};
