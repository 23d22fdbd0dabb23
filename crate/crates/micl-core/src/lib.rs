//! Core laboratory for in-context learning on finite sets of Markov chains:
//! exact Bayes predictors, a trainable two-layer transformer, the
//! symmetry-constrained attention-only model with its escape-dynamics theory,
//! circuit tracing, and the minimal memorization network.

pub mod bayes;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod optim;
pub mod sa;
pub mod tensor;
pub mod markov;
pub mod minimal;
pub mod streams;
pub mod theory;
pub mod tracing;
pub mod transformer;

pub use error::{Error, Result};
