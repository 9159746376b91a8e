//! Variational autoencoders with plain and skip-connected decoders.
//!
//! The crate covers the whole experimental loop on binarized images:
//! a small reverse-mode autodiff engine ([`autodiff`]), the Gaussian and
//! Bernoulli kernels of the model ([`distributions`]), encoder and decoder
//! networks ([`models`]), ELBO training with optional amortized-then-refined
//! inference ([`training`]), latent-collapse diagnostics ([`metrics`]), a
//! closed-form linear-Gaussian reference model ([`oracle`]) and dataset /
//! checkpoint handling ([`data`]).

pub mod autodiff;
pub mod data;
pub mod distributions;
mod error;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, NumericAbort, Result};
