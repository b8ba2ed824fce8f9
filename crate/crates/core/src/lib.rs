//! Mixture-of-hidden-dimensions transformer at desk scale.
//!
//! Hidden-dimension slices ("sub-dimensions") are routed per token: a fixed
//! set of shared slices is always active and a top-k set of specialised slices
//! is chosen by a learned router. Sparse outputs are rescaled and redistributed
//! across the full width by a grouped fusion map.

pub mod cli;
pub mod config;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod router;
pub mod sparsity;
pub mod training;

pub use error::{MohdError, Result};
pub use numerics::{Tape, Tensor, Var};
