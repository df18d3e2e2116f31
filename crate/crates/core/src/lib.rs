//! Stein variational gradient descent, amortized neural samplers and
//! adversarial maximum-likelihood training of energy-based models.
//!
//! Module map:
//!
//! - [`adcore`]: dense f64 tensors, a reverse-mode tape, MLPs and checkpoints.
//! - [`kernels`]: RBF and feature-space kernels plus the median bandwidth.
//! - [`svgd`]: the Stein operator, particle directions, runs and KSD.
//! - [`amortize`]: training generators to follow SVGD dynamics.
//! - [`energy`]: analytic targets and autoencoder-based energy models.
//! - [`steingan`]: the alternating sampler/energy training loop.
//! - [`optim`]: SGD, AdaGrad and Adam over flat parameter vectors.
//! - [`harness`]: configs, datasets, file formats and the experiment runner.

pub mod adcore;
pub mod amortize;
pub mod energy;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod optim;
pub mod par;
pub mod rng;
pub mod steingan;
pub mod svgd;

pub use adcore::{Activation, Mlp, MlpSpec, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use svgd::{ParticleSet, TargetDensity};
