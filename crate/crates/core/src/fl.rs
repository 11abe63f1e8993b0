//! Vanilla federated rounds: τ-step local SGD and weighted aggregation.

use std::collections::BTreeMap;

use crate::data::{shuffled, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::harness::{self, Algorithm, ExperimentConfig, RunOutput};
use crate::models::Model;
use crate::numerics::{ParamVector, RngStream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundConfig {
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
}

impl RoundConfig {
    pub fn new(eta: f64, tau: usize, batch_size: usize) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
        }
        if tau == 0 || batch_size == 0 {
            return Err(Error::invalid("tau and batch_size must be >= 1"));
        }
        Ok(Self {
            eta,
            tau,
            batch_size,
        })
    }

    /// Step size `1/√(τT)`.
    pub fn corollary_eta(tau: usize, rounds: usize) -> f64 {
        1.0 / ((tau * rounds.max(1)) as f64).sqrt()
    }
}

/// Per-worker simulation state.
#[derive(Clone, Debug)]
pub struct WorkerState {
    pub worker_id: usize,
    pub shard: Vec<usize>,
    pub theta_local: ParamVector,
    /// Worker-side copy of the look-back gradient.
    pub lbg: Option<ParamVector>,
    pub ef_residual: Option<ParamVector>,
    pub rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
}

impl WorkerState {
    pub fn new(worker_id: usize, shard: Vec<usize>, dim: usize, rng: RngStream) -> Self {
        Self {
            worker_id,
            shard,
            theta_local: ParamVector::zeros(dim),
            lbg: None,
            ef_residual: None,
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Next minibatch of sample indices. A new shuffled pass starts whenever
    /// the previous one is exhausted; the last batch of a pass may be short.
    pub(crate) fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = shuffled(&self.shard, &mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Runs τ local SGD steps from `theta_global` and returns the accumulated
/// (summed, not averaged) stochastic gradient.
pub fn local_round(
    worker: &mut WorkerState,
    theta_global: &ParamVector,
    cfg: &RoundConfig,
    model: &Model,
    dataset: &Dataset,
) -> Result<ParamVector> {
    check_dim(model.param_dim(), theta_global.dim())?;
    if worker.shard.is_empty() {
        return Err(Error::EmptyShard(worker.worker_id));
    }
    let mut theta = theta_global.clone();
    let mut acc = ParamVector::zeros(theta.dim());
    for _ in 0..cfg.tau {
        let batch = dataset.subset(worker.next_batch(cfg.batch_size));
        let g = model.gradient(&theta, &batch)?;
        theta.axpy_in_place(-cfg.eta, &g)?;
        acc.axpy_in_place(1.0, &g)?;
    }
    worker.theta_local = theta.ensure_finite("local_round")?;
    acc.ensure_finite("local_round")
}

/// Server-side state shared by every protocol.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub theta_global: ParamVector,
    /// Server-side copies of each worker's look-back gradient.
    pub lbg_copies: BTreeMap<usize, ParamVector>,
    pub round: usize,
}

impl ServerState {
    pub fn new(theta0: ParamVector) -> Self {
        Self {
            theta_global: theta0,
            lbg_copies: BTreeMap::new(),
            round: 0,
        }
    }
}

/// `θ − η · Σ_k ω_k g_k`, summing in ascending worker id.
///
/// `grads` and `weights` are keyed by worker id and must cover the same
/// workers.
pub fn aggregate(
    theta: &ParamVector,
    grads: &BTreeMap<usize, ParamVector>,
    weights: &BTreeMap<usize, f64>,
    eta: f64,
) -> Result<ParamVector> {
    let direction = weighted_sum(theta.dim(), grads, weights)?;
    theta.axpy(-eta, &direction)
}

pub(crate) fn weighted_sum(
    dim: usize,
    grads: &BTreeMap<usize, ParamVector>,
    weights: &BTreeMap<usize, f64>,
) -> Result<ParamVector> {
    if grads.len() != weights.len() || grads.keys().zip(weights.keys()).any(|(a, b)| a != b) {
        return Err(Error::invalid(
            "weights must cover exactly the reporting workers",
        ));
    }
    let mut sum = ParamVector::zeros(dim);
    for (k, g) in grads {
        sum.axpy_in_place(weights[k], g)?;
    }
    sum.ensure_finite("aggregate")
}

/// Vanilla federated training with full participation.
pub fn run_vanilla(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.algorithm = Algorithm::Vanilla;
    harness::run_experiment(&cfg)
}
