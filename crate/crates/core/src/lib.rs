//! Deterministic single-process simulation of federated optimization.
//!
//! Clients hold disjoint shards of a dataset. Each round the server samples a
//! fraction of them, every sampled client runs local minibatch SGD from the
//! current global parameters, and the server replaces the global parameters
//! with the data-size-weighted average of the returned models
//! ([`federation::run_round`]). With one full-batch local step this is
//! federated SGD; with several local steps it is federated averaging.
//!
//! * [`nn`]: logistic regression and a two-hidden-layer ReLU perceptron over
//!   flat parameter vectors, with hand-written gradients.
//! * [`data`]: MNIST IDX loading, synthetic data, IID / label-shard /
//!   power-law client partitions.
//! * [`federation`]: sampling, local updates, aggregation, full runs.
//! * [`harness`]: learning-rate grids, monotone curves, rounds-to-target,
//!   speedups and the parameter interpolation study.
//! * [`config`] and [`experiment`]: the file-driven experiment runner behind
//!   the `fedavg` command line tool.
//!
//! Every random draw is keyed by a seed path derived from the master seed
//! ([`rng`]), so results do not depend on thread scheduling.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod params;
pub mod rng;

pub use data::{BatchSize, Dataset, Partition};
pub use error::{Error, Result};
pub use federation::{Execution, Federation, RoundConfig};
pub use harness::LearningCurve;
pub use nn::{Batch, ModelSpec};
pub use params::ParamVector;
