//! Binarization-aware training toolkit.
//!
//! The crate is organized around forward-backward quantizer pairs: a forward
//! map `F` applied to continuous weights in the forward pass and a backward
//! multiplier `B` substituted for `F'` in the chain rule. On top of that it
//! provides the update rules of the ProxConnect family, a numerical analyzer
//! that decides whether a given `(F, B)` pair factors through a proximal
//! quantizer, binarized layers with bit-packed export, and a small experiment
//! harness for MNIST/CIFAR-scale models.

pub mod autodiff;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod quantizers;
pub mod tensor;

pub use error::Error;
pub use tensor::Tensor;
