//! The round engine: client sampling, local SGD, weighted aggregation and
//! multi-round runs for FedAvg and FedSGD.
//!
//! FedSGD is the special case `E = 1, B = inf`: every selected client takes a
//! single full-batch gradient step, and the weighted average of those models
//! is one step of gradient descent on the union of their data.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchSize, Dataset, Partition};
use crate::error::{Error, Result};
use crate::harness::LearningCurve;
use crate::nn::{self, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{derive_seed, rng_from, tag};

/// How client updates within a round are scheduled. Results do not depend on it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Fraction of clients selected each round, `C`.
    pub client_fraction: f64,
    /// Local passes over the client data per round, `E`.
    pub local_epochs: usize,
    /// Local minibatch size, `B`.
    pub batch_size: BatchSize,
    pub learning_rate: f64,
    /// Server-side multiplier applied to the learning rate after every round.
    pub lr_decay: f64,
    pub master_seed: u64,
    pub max_rounds: usize,
    pub eval_every: usize,
    /// Also evaluate the loss on the full training set at each evaluation.
    pub eval_train_loss: bool,
    /// Stop after the first evaluation whose test accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    pub execution: Execution,
}

impl RoundConfig {
    pub fn fedavg(
        client_fraction: f64,
        local_epochs: usize,
        batch_size: BatchSize,
        learning_rate: f64,
    ) -> Self {
        RoundConfig {
            client_fraction,
            local_epochs,
            batch_size,
            learning_rate,
            lr_decay: 1.0,
            master_seed: 0,
            max_rounds: 100,
            eval_every: 1,
            eval_train_loss: true,
            stop_at_accuracy: None,
            execution: Execution::default(),
        }
    }

    /// `E = 1, B = inf`.
    pub fn fedsgd(client_fraction: f64, learning_rate: f64) -> Self {
        Self::fedavg(client_fraction, 1, BatchSize::Full, learning_rate)
    }

    pub fn is_fedsgd(&self) -> bool {
        self.local_epochs == 1 && self.batch_size == BatchSize::Full
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.client_fraction) {
            return Err(Error::invalid(format!(
                "client fraction must lie in [0, 1], got {}",
                self.client_fraction
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// Server state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedState {
    /// Rounds completed so far.
    pub round: usize,
    pub params: ParamVector,
    pub learning_rate: f64,
}

impl FederatedState {
    pub fn new(params: ParamVector, learning_rate: f64) -> Self {
        FederatedState {
            round: 0,
            params,
            learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub test_accuracy: f64,
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// Local SGD steps taken by each selected client.
    pub local_updates: Vec<usize>,
    pub metrics: Option<RoundMetrics>,
}

/// The model family and the federated training data.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: ModelSpec,
    pub train: &'a Dataset,
    pub partition: &'a Partition,
}

impl<'a> Federation<'a> {
    pub fn new(spec: ModelSpec, train: &'a Dataset, partition: &'a Partition) -> Result<Self> {
        spec.validate()?;
        if train.input_dim() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim(),
                found: train.input_dim(),
            });
        }
        if partition.total() != train.len() {
            return Err(Error::invalid(format!(
                "partition covers {} examples but the dataset has {}",
                partition.total(),
                train.len()
            )));
        }
        Ok(Federation {
            spec,
            train,
            partition,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.partition.num_clients()
    }
}

/// `max(floor(C * K), 1)`
pub fn clients_per_round(k: usize, client_fraction: f64) -> usize {
    (((client_fraction * k as f64) + 1e-9).floor() as usize).clamp(1, k)
}

/// Uniform sample without replacement of `max(floor(C * K), 1)` client ids,
/// ascending. Deterministic in `(master_seed, round)`.
pub fn sample_clients(
    k: usize,
    client_fraction: f64,
    master_seed: u64,
    round: usize,
) -> Vec<usize> {
    let m = clients_per_round(k, client_fraction);
    let mut rng = rng_from(master_seed, &[tag::SAMPLE, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Seed for one client's local training in one round.
pub fn client_seed(master_seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(master_seed, &[tag::CLIENT, round as u64, client as u64])
}

/// Local training hyperparameters for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: BatchSize,
    pub learning_rate: f64,
}

/// One client's local data: rows of a shared dataset.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
}

/// Runs `epochs` passes of minibatch SGD over the client's data starting from
/// `w`, reshuffling every epoch. Returns the new parameters; `w` is untouched.
pub fn client_update(
    spec: &ModelSpec,
    client: ClientData<'_>,
    w: &ParamVector,
    local: &LocalTraining,
    seed: u64,
) -> Result<ParamVector> {
    if client.indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if local.learning_rate.is_nan() || local.learning_rate < 0.0 {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    let mut params = w.clone();
    let mut grad = vec![0.0; params.len()];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for epoch in 0..local.epochs {
        let epoch_seed = derive_seed(seed, &[epoch as u64]);
        for batch_idx in make_batches(client.indices, local.batch_size, epoch_seed) {
            let batch = client.dataset.gather(&batch_idx, &mut xs, &mut ys);
            nn::loss_and_gradient_into(spec, &params, &batch, &mut grad)?;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= local.learning_rate * g;
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            round: 0,
            client: 0,
        });
    }
    Ok(params)
}

/// Weighted average `sum(n_k * w_k) / sum(n_k)`, accumulated in the order
/// given. Computed as `w_0 + sum(p_k * (w_k - w_0))` so that averaging
/// identical vectors returns that vector exactly.
pub fn aggregate(updates: &[(usize, &ParamVector)]) -> Result<ParamVector> {
    let Some(&(_, anchor)) = updates.first() else {
        return Err(Error::invalid("cannot aggregate an empty list of updates"));
    };
    let total: usize = updates.iter().map(|&(n, _)| n).sum();
    if total == 0 || updates.iter().any(|&(n, _)| n == 0) {
        return Err(Error::invalid("client weights must be positive"));
    }
    if let Some(&(_, w)) = updates.iter().find(|(_, w)| w.len() != anchor.len()) {
        return Err(Error::DimensionMismatch {
            expected: anchor.len(),
            found: w.len(),
        });
    }
    let mut out = anchor.clone();
    let total = total as f64;
    for &(n, w) in &updates[1..] {
        let p = n as f64 / total;
        for ((o, &a), &b) in out.iter_mut().zip(anchor.iter()).zip(w.iter()) {
            *o += p * (b - a);
        }
    }
    Ok(out)
}

/// `E * n / (K * B)`; `E` when `B` is infinite.
pub fn expected_updates_per_round(epochs: usize, n: usize, k: usize, batch: BatchSize) -> f64 {
    match batch {
        BatchSize::Full => epochs as f64,
        BatchSize::Size(b) => (epochs * n) as f64 / (k * b) as f64,
    }
}

/// One round: sample, train every selected client from the same `w_t`,
/// average over the selected clients only, decay the learning rate.
pub fn run_round(
    fed: &Federation<'_>,
    state: &FederatedState,
    cfg: &RoundConfig,
) -> Result<(FederatedState, RoundReport)> {
    let round = state.round + 1;
    let selected = sample_clients(
        fed.num_clients(),
        cfg.client_fraction,
        cfg.master_seed,
        round,
    );
    let local = LocalTraining {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        learning_rate: state.learning_rate,
    };

    let train_one = |&k: &usize| -> Result<ParamVector> {
        let client = ClientData {
            dataset: fed.train,
            indices: fed.partition.client(k),
        };
        client_update(
            &fed.spec,
            client,
            &state.params,
            &local,
            client_seed(cfg.master_seed, round, k),
        )
        .map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { round, client: k },
            other => other,
        })
    };

    let updated: Vec<ParamVector> = match cfg.execution {
        Execution::Serial => selected.iter().map(train_one).collect::<Result<_>>()?,
        Execution::Parallel => parallel_map(&selected, train_one)?,
    };

    let weighted: Vec<(usize, &ParamVector)> = selected
        .iter()
        .zip(&updated)
        .map(|(&k, w)| (fed.partition.client(k).len(), w))
        .collect();
    let params = aggregate(&weighted)?;

    let local_updates = selected
        .iter()
        .map(|&k| cfg.local_epochs * cfg.batch_size.num_batches(fed.partition.client(k).len()))
        .collect();
    Ok((
        FederatedState {
            round,
            params,
            learning_rate: state.learning_rate * cfg.lr_decay,
        },
        RoundReport {
            round,
            selected,
            local_updates,
            metrics: None,
        },
    ))
}

#[cfg(feature = "parallel")]
fn parallel_map<F>(ids: &[usize], f: F) -> Result<Vec<ParamVector>>
where
    F: Fn(&usize) -> Result<ParamVector> + Sync + Send,
{
    use rayon::prelude::*;
    ids.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<F>(ids: &[usize], f: F) -> Result<Vec<ParamVector>>
where
    F: Fn(&usize) -> Result<ParamVector>,
{
    ids.iter().map(f).collect()
}

/// Where a run stopped early because parameters became non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub round: usize,
    pub client: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Raw test accuracy at each evaluation round.
    pub test_accuracy: LearningCurve,
    /// Raw training loss at each evaluation round, when enabled.
    pub train_loss: LearningCurve,
    pub final_params: ParamVector,
    pub rounds_completed: usize,
    pub diverged: Option<Divergence>,
}

/// Runs up to `cfg.max_rounds` rounds from `init`, evaluating every
/// `cfg.eval_every` rounds.
pub fn run_federated(
    fed: &Federation<'_>,
    test: &Dataset,
    cfg: &RoundConfig,
    init: ParamVector,
) -> Result<RunOutput> {
    run_federated_with(fed, test, cfg, init, |_| {})
}

/// [`run_federated`] with a callback invoked after every round.
pub fn run_federated_with(
    fed: &Federation<'_>,
    test: &Dataset,
    cfg: &RoundConfig,
    init: ParamVector,
    mut observe: impl FnMut(&RoundReport),
) -> Result<RunOutput> {
    cfg.validate()?;
    if init.len() != fed.spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: fed.spec.param_count(),
            found: init.len(),
        });
    }
    let mut state = FederatedState::new(init, cfg.learning_rate);
    let mut test_accuracy = LearningCurve::new();
    let mut train_loss = LearningCurve::new();
    let mut diverged = None;

    while state.round < cfg.max_rounds {
        let (next, mut report) = match run_round(fed, &state, cfg) {
            Ok(r) => r,
            Err(Error::Divergence { round, client }) => {
                diverged = Some(Divergence { round, client });
                break;
            }
            Err(e) => return Err(e),
        };
        state = next;

        let mut reached = false;
        if state.round.is_multiple_of(cfg.eval_every) {
            let acc = nn::evaluate(&fed.spec, &state.params, &test.as_batch())?.accuracy;
            test_accuracy.push(state.round as u32, acc)?;
            let loss = if cfg.eval_train_loss {
                let l = nn::evaluate(&fed.spec, &state.params, &fed.train.as_batch())?.loss;
                train_loss.push(state.round as u32, l)?;
                Some(l)
            } else {
                None
            };
            report.metrics = Some(RoundMetrics {
                test_accuracy: acc,
                train_loss: loss,
            });
            reached = cfg.stop_at_accuracy.is_some_and(|t| acc >= t);
        }
        observe(&report);
        if reached {
            break;
        }
    }

    Ok(RunOutput {
        test_accuracy,
        train_loss,
        rounds_completed: state.round,
        final_params: state.params,
        diverged,
    })
}
