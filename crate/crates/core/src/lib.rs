//! Class-conditional-prior variational autoencoder.
//!
//! The generative model is `p(y) p(z|y) p(x|z)` with a learnable Gaussian
//! prior per class; recognition is `q(y|x) q(z|x,y)` where the class enters
//! only as a bias on the latent mean, so marginalizing over classes needs a
//! single pass through the recognition trunk. Classification uses either a
//! softmax head or the ordinal "ordmax" head.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod figures;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, Activation, ParamStore, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
