//! greenvae: a CPU laboratory for training small variational autoencoder
//! variants and benchmarking them by reconstruction quality, Fréchet
//! distance, parameter count, FLOPs and forward time.
//!
//! The crate is organized around a from-scratch reverse-mode tensor engine
//! ([`tape`]) on which all models are built: the plain convolutional VAE,
//! regularized deterministic autoencoders (L2 / gradient-penalty / spectral
//! norm), inverse autoregressive flows, a small hierarchical VAE with
//! per-group KL balancing, ex-post Gaussian-mixture latent fitting and a
//! two-stage latent VAE. The `train` module plus the companion CLI crate
//! provide the reproducibility shell: seeded runs, line-based configs,
//! checkpoints, CSV reports and PPM/PGM image grids.

pub mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod flows;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod latent;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod rae;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
