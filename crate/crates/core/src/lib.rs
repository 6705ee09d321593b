//! Clustering-enhanced stochastic gradient MCMC for hidden Markov models.
//!
//! The crate provides exact HMM likelihood and gradient routines, the
//! subchain gradient estimators (full, uniform minibatch and stratified),
//! kmeans++ clustering of subchains, the SG-MCMC and CSG-MCMC samplers, and
//! the evaluation metrics and experiment driver used to compare them.

pub mod clustering;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hmm;
pub mod sampler;
pub mod subchain;

pub use error::{Error, Result};
