//! Spiking variational autoencoder whose latent space is a vector of Poisson
//! firing rates.
//!
//! The encoder is a convolutional LIF network; its output spike trains are
//! reduced to firing rates, re-sampled as Bernoulli spike trains with a
//! surrogate gradient, and decoded by a mirrored spiking decoder. A small
//! bottleneck maps Gaussian noise to prior rates, matched to the posterior by
//! an RBF-kernel MMD on rates.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod latent;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod train;

pub use config::{ArchScale, ModelConfig};
pub use data::Dataset;
pub use error::{Error, Result};
pub use latent::{LatentSample, RateVector, SamplerDraw};
pub use loss::{Bandwidth, LossReport};
pub use metrics::{EnergyReport, Histogram};
pub use model::Model;
pub use snn::{BnMode, LifParams, SpikeTrain};
pub use tensor::{Tape, Tensor, Var};
pub use train::{EpochMetrics, Trainer};
