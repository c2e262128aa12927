//! Non-negative contrastive learning on exactly-computable latent-class
//! models.
//!
//! The crate builds finite generative models where every population
//! quantity (co-occurrence matrix, marginals, posteriors, closed-form
//! optimal features) is exact, implements the contrastive and
//! factorization objectives with analytic gradients, trains tabular and
//! MLP encoders with optional non-negative output transforms, and measures
//! the resulting features: sparsity, orthogonality, class consistency,
//! expected activation, retrieval precision, disentanglement, alignment,
//! and Bayes agreement.

pub mod config;
pub mod encoders;
pub mod error;
pub mod features;
pub mod io;
pub mod latent_model;
pub mod linalg;
pub mod metrics;
pub mod objectives;
pub mod reparam;
pub mod report;
pub mod training;

pub use error::{NclError, Result};
