//! Round-by-round simulation engine shared by every federated algorithm.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;

use super::config::{Algorithm, DataSource, EtaRule, ExperimentConfig};
use super::ledger::{CommLedger, MetricsRow, MetricsTable};
use crate::compress::{ef_wrap, stack_with_gate, Compressor, SignRule};
use crate::data::{load_idx, partition, synth_classification, synth_regression, Dataset};
use crate::error::{Error, Result};
use crate::fl::{local_round, weighted_sum, RoundConfig, ServerState, WorkerState};
use crate::lbgm::{reconstruct, GateDecision, LbgmConfig, UplinkMessage};
use crate::models::Model;
use crate::numerics::{stream, ParamVector, RngStream};

/// Train and test sets for a config.
///
/// Synthetic sets are drawn as one sample of `n_train + n_test` and split, so
/// both halves share class centers (or regression weights).
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let spec = &cfg.data;
    let mut rng = RngStream::new(cfg.seed, stream::DATA);
    match &spec.source {
        DataSource::Synthetic => {
            let all = synth_classification(
                spec.n_train + spec.n_test,
                spec.dim,
                spec.classes,
                spec.separation,
                &mut rng,
            )?;
            all.split_at(spec.n_train)
        }
        DataSource::SyntheticRegression => {
            let all = synth_regression(
                spec.n_train + spec.n_test,
                spec.dim,
                spec.outputs,
                spec.noise,
                &mut rng,
            )?;
            all.split_at(spec.n_train)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?.truncate(spec.n_train);
            let test = load_idx(test_images, test_labels)?.truncate(spec.n_test);
            if train.dim() != test.dim() {
                return Err(Error::invalid("train and test images differ in size"));
            }
            Ok((train, test))
        }
    }
}

pub fn build_model(cfg: &ExperimentConfig, train: &Dataset) -> Model {
    use crate::models::ModelKind;
    match cfg.model_kind {
        ModelKind::LinearRegression => {
            let outputs = match train.labels() {
                crate::models::Labels::Values { dim, .. } => *dim,
                crate::models::Labels::Classes(_) => cfg.data.outputs,
            };
            Model::linear_regression(train.dim(), outputs)
        }
        ModelKind::SoftmaxClassifier => Model::softmax_classifier(train.dim(), train.num_classes()),
        ModelKind::Mlp1h => Model::mlp1h(train.dim(), cfg.hidden, train.num_classes()),
    }
}

/// What one worker produced in one round, before the server sees it.
struct Outgoing {
    worker: usize,
    msg: UplinkMessage,
    /// `‖d‖² sin²α` with `d = g/τ`, when a look-back gradient existed.
    delta_sq: Option<f64>,
}

/// A federated run in progress.
pub struct Simulation {
    cfg: ExperimentConfig,
    model: Model,
    train: Dataset,
    test: Dataset,
    workers: Vec<WorkerState>,
    weights: Vec<f64>,
    server: ServerState,
    server_rng: RngStream,
    round_cfg: RoundConfig,
    compressor: Compressor,
    lbgm: LbgmConfig,
    ledger: CommLedger,
    metrics: MetricsTable,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.algorithm == Algorithm::CentralizedAnalyze {
            return Err(Error::invalid("centralized_analyze is not a federated run"));
        }
        let (train, test) = load_data(cfg)?;
        Self::with_data(cfg, train, test)
    }

    /// As [`Simulation::new`] with caller-supplied data.
    pub fn with_data(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        let model = build_model(cfg, &train);
        let mut part_rng = RngStream::new(cfg.seed, stream::PARTITION);
        let part = partition(&train, cfg.workers, cfg.partition, &mut part_rng)?;

        let tau = match cfg.tau {
            Some(t) => t,
            None => {
                let largest = part.shards().iter().map(Vec::len).max().unwrap_or(1);
                largest.div_ceil(cfg.batch_size)
            }
        };
        let eta = match cfg.eta {
            EtaRule::Constant(e) => e,
            EtaRule::Corollary => RoundConfig::corollary_eta(tau, cfg.rounds),
        };
        let round_cfg = RoundConfig::new(eta, tau, cfg.batch_size)?;

        let dim = model.param_dim();
        let mut rng0 = RngStream::new(cfg.seed, 0);
        let theta0 = model.init_params(&mut rng0);
        let mut rng0 = Some(rng0);
        let workers = (0..cfg.workers)
            .map(|k| {
                let rng = match k {
                    0 => rng0.take().expect("worker 0 stream"),
                    _ => RngStream::new(cfg.seed, k as u64),
                };
                WorkerState::new(k, part.shard(k).to_vec(), dim, rng)
            })
            .collect();

        let compressor = match cfg.algorithm {
            Algorithm::TopK | Algorithm::TopKLbgm => Compressor::topk_fraction(cfg.k_frac, dim),
            Algorithm::RankR | Algorithm::RankRLbgm => Compressor::RankR {
                rank: cfg.rank,
                shapes: model.layer_shapes().to_vec(),
            },
            Algorithm::Sign | Algorithm::SignLbgm => Compressor::Sign,
            _ => Compressor::Identity,
        };
        let lbgm = LbgmConfig {
            delta_threshold: LbgmConfig::new(cfg.delta)?.delta_threshold,
            monitor_delta_sq: cfg.monitor_delta_sq,
        };

        let mut sim = Self {
            cfg: cfg.clone(),
            model,
            train,
            test,
            workers,
            weights: part.weights().to_vec(),
            server: ServerState::new(theta0),
            server_rng: RngStream::new(cfg.seed, stream::SERVER),
            round_cfg,
            compressor,
            lbgm,
            ledger: CommLedger::new(),
            metrics: MetricsTable::default(),
        };
        let row = sim.evaluate(0.0, None)?;
        sim.metrics.rows.push(row);
        Ok(sim)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn metrics(&self) -> &MetricsTable {
        &self.metrics
    }

    pub fn round_config(&self) -> &RoundConfig {
        &self.round_cfg
    }

    /// Workers taking part in the next round, ascending.
    fn participants(&mut self) -> Vec<usize> {
        let k = self.workers.len();
        if self.cfg.algorithm != Algorithm::LbgmSampled {
            return (0..k).collect();
        }
        let m = ((self.cfg.sample_fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k);
        let mut picked = index::sample(&mut self.server_rng, k, m).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Runs one round and appends its metrics row.
    pub fn step(&mut self) -> Result<&MetricsRow> {
        let round = self.server.round + 1;
        let chosen = self.participants();
        let mut active = vec![false; self.workers.len()];
        for &k in &chosen {
            active[k] = true;
        }

        let algorithm = self.cfg.algorithm;
        let use_ef = self.cfg.error_feedback && matches!(self.compressor, Compressor::TopK { .. });
        let (theta, round_cfg, model, train) = (
            &self.server.theta_global,
            &self.round_cfg,
            &self.model,
            &self.train,
        );
        let (compressor, lbgm) = (&self.compressor, &self.lbgm);
        let outgoing: Vec<Outgoing> = self
            .workers
            .par_iter_mut()
            .filter(|w| active[w.worker_id])
            .map(|w| -> Result<Outgoing> {
                let g = local_round(w, theta, round_cfg, model, train)?;
                let payload = if use_ef {
                    let residual = w
                        .ef_residual
                        .take()
                        .unwrap_or_else(|| ParamVector::zeros(g.dim()));
                    let (payload, residual) = ef_wrap(&residual, &g, |p| compressor.compress(p))?;
                    w.ef_residual = Some(residual);
                    payload
                } else {
                    compressor.compress(&g)?
                };
                if !algorithm.uses_lbgm() {
                    return Ok(Outgoing {
                        worker: w.worker_id,
                        msg: UplinkMessage::from_payload(payload),
                        delta_sq: None,
                    });
                }
                let (msg, decision, dense) = stack_with_gate(payload, w.lbg.as_ref(), lbgm)?;
                if let GateDecision::Full { .. } = decision {
                    w.lbg = Some(dense.clone());
                }
                let tau = round_cfg.tau as f64;
                let delta_sq = decision
                    .lbp_error()
                    .map(|e| dense.norm_sq() / (tau * tau) * e);
                Ok(Outgoing {
                    worker: w.worker_id,
                    msg,
                    delta_sq,
                })
            })
            .collect::<Result<_>>()?;

        let mut grads = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut scalars = 0usize;
        let mut proxy: Option<f64> = None;
        for out in &outgoing {
            self.ledger.record(round, out.worker, &out.msg);
            scalars += usize::from(out.msg.kind().is_scalar());
            if let Some(d) = out.delta_sq {
                proxy = Some(proxy.map_or(d, |p| p.max(d)));
            }
            let g = if algorithm.uses_lbgm() {
                reconstruct(&mut self.server, out.worker, &out.msg)?
            } else {
                out.msg.dense().expect("non-LBGM messages are full")
            };
            grads.insert(out.worker, g);
            weights.insert(out.worker, self.weights[out.worker]);
        }

        let dim = self.server.theta_global.dim();
        let mut direction = weighted_sum(dim, &grads, &weights)?;
        if self.compressor == Compressor::Sign && self.cfg.sign_rule == SignRule::Majority {
            direction = ParamVector::new(
                direction
                    .as_slice()
                    .iter()
                    .map(|&x| if x >= 0.0 { 1.0 } else { -1.0 })
                    .collect(),
            )?;
        }
        let mut eta = self.round_cfg.eta;
        if algorithm == Algorithm::LbgmSampled {
            eta /= chosen.len() as f64;
        }
        self.server.theta_global = self
            .server
            .theta_global
            .axpy(-eta, &direction)?
            .ensure_finite("aggregate")?;
        self.server.round = round;

        let fraction = scalars as f64 / outgoing.len() as f64;
        let proxy = if self.lbgm.monitor_delta_sq && algorithm.uses_lbgm() {
            proxy
        } else {
            None
        };
        let row = self.evaluate(fraction, proxy)?;
        self.metrics.rows.push(row);
        Ok(self.metrics.rows.last().expect("just pushed"))
    }

    fn evaluate(&self, scalar_fraction: f64, delta_sq_proxy: Option<f64>) -> Result<MetricsRow> {
        let theta = &self.server.theta_global;
        let train_loss = self.model.forward_loss(theta, &self.train)?;
        let eval = self.model.evaluate(theta, &self.test)?;
        Ok(MetricsRow {
            round: self.server.round,
            train_loss,
            test_metric: eval.accuracy.unwrap_or(eval.loss),
            cum_floats: self.ledger.total_floats(),
            cum_bits: self.ledger.total_bits(),
            scalar_fraction,
            delta_sq_proxy,
        })
    }

    /// Runs the remaining rounds.
    pub fn run(mut self) -> Result<super::RunOutput> {
        while self.server.round < self.cfg.rounds {
            self.step()?;
        }
        Ok(super::RunOutput {
            metrics: self.metrics,
            ledger: self.ledger,
            final_theta: self.server.theta_global,
        })
    }
}
