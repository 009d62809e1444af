//! Simulator and trainer for networks of magnetic domain-wall binary
//! stochastic synapses.
//!
//! - [`device`]: calibrated passing probability `f(h)` and synapse sampling.
//! - [`network`]: the sampled single-layer perceptron, its analytic output
//!   moments and the [`network::SynapseBackend`] abstraction.
//! - [`learning`]: stochastic and mean-field gradient rules, Adam, training
//!   with early stopping, evaluation and sweeps.
//! - [`data`]: MNIST ingestion, 14×14 binarization and splits.
//! - [`analysis`]: figure data (histograms, output distributions, spreads).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod device;
pub mod error;
pub mod learning;
pub mod network;
pub mod rng;

pub use checkpoint::Checkpoint;
pub use data::{BinarizedDataset, Split};
pub use device::{PassingProbabilityModel, PhysicalRange, SynapseSample};
pub use error::{BackendError, DataError, Error, Result};
pub use learning::{
    evaluate, evaluate_with, mean_field_gradient, stochastic_gradient, train, AdamState,
    EvalReport, Gradients, Rule, TrainConfig, TrainHistory,
};
pub use network::{
    forward_mean_field, forward_sampled, forward_stats, softmax_cross_entropy, Forward,
    ForwardResult, LocalBackend, OutputStats, SamplingMode, SynapseBackend, SynapseFieldNetwork,
    SynapseQuery,
};
