//! Experiment front door: configuration, the communication ledger, metrics
//! and CSV output.
//!
//! Output schema:
//!
//! | file             | columns                                                                          |
//! |------------------|----------------------------------------------------------------------------------|
//! | `metrics.csv`    | round, train_loss, test_metric, cum_floats, cum_bits, scalar_fraction, delta_sq_proxy |
//! | `ledger.csv`     | round, worker, floats, bits                                                      |
//! | `npca.csv`       | epoch, n95, n99                                                                  |
//! | `overlap.csv`    | one row per epoch gradient, one column per principal direction                   |
//! | `similarity.csv` | T×T cosine similarities                                                          |

mod config;
mod ledger;
mod sim;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{
    parse_config, Algorithm, DataSource, DataSpec, EtaRule, ExperimentConfig, RawConfig,
};
pub use ledger::{ledger_cost, CommLedger, LedgerRow, MetricsRow, MetricsTable, METRICS_HEADER};
pub use sim::{build_model, load_data, Simulation};

use crate::analyzer::{
    overlap_matrix, pgd, record_centralized, similarity_matrix, CentralizedRecord,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, RngStream};

/// Everything a federated run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: MetricsTable,
    pub ledger: CommLedger,
    pub final_theta: ParamVector,
}

/// Runs a federated algorithm in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    Simulation::new(cfg)?.run()
}

/// Centralized SGD for `rounds` epochs, recording epoch gradients.
pub fn run_analysis(cfg: &ExperimentConfig) -> Result<CentralizedRecord> {
    let (train, _) = load_data(cfg)?;
    let model = build_model(cfg, &train);
    let eta = match cfg.eta {
        EtaRule::Constant(e) => e,
        EtaRule::Corollary => {
            let batches = train.len().div_ceil(cfg.batch_size);
            crate::fl::RoundConfig::corollary_eta(batches, cfg.rounds)
        }
    };
    record_centralized(
        &model,
        &train,
        cfg.rounds,
        eta,
        cfg.batch_size,
        RngStream::new(cfg.seed, 0),
    )
}

/// Files written by [`run`] and its summary line.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Runs `cfg`, writes its CSVs under `cfg.out_dir` and builds the summary.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    if cfg.algorithm == Algorithm::CentralizedAnalyze {
        return write_analysis(cfg, &run_analysis(cfg)?);
    }
    let out = run_experiment(cfg)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let ledger_path = cfg.out_dir.join("ledger.csv");
    out.metrics.write_csv(&metrics_path)?;
    out.ledger.write_csv(&ledger_path)?;

    let last = out.metrics.last().expect("metrics start with round 0");
    let metric_name = if cfg.model_kind.is_classifier() {
        "test_accuracy"
    } else {
        "test_loss"
    };
    let mut summary = format!(
        "{} rounds={} {}={:.4} total_floats={} total_bits={}",
        cfg.algorithm, last.round, metric_name, last.test_metric, last.cum_floats, last.cum_bits
    );
    if let Some(base) = &cfg.baseline {
        summary.push_str(&format!(" savings_vs_baseline={}", savings_vs(base, last)?));
    }
    Ok(RunReport {
        files: vec![metrics_path, ledger_path],
        summary,
    })
}

/// `1 − floats(this)/floats(baseline)` at the baseline row with the same round.
fn savings_vs(baseline: &Path, last: &MetricsRow) -> Result<String> {
    let base = MetricsTable::read_csv(baseline)?;
    let row = base
        .rows
        .iter()
        .find(|r| r.round == last.round)
        .ok_or_else(|| {
            Error::invalid(format!(
                "{} has no round {}",
                baseline.display(),
                last.round
            ))
        })?;
    if row.cum_floats == 0.0 {
        return Ok("n/a".to_string());
    }
    Ok(format!(
        "{:.2}%",
        100.0 * (1.0 - last.cum_floats / row.cum_floats)
    ))
}

fn write_analysis(cfg: &ExperimentConfig, rec: &CentralizedRecord) -> Result<RunReport> {
    let dir = &cfg.out_dir;
    let npca_path = dir.join("npca.csv");
    let mut w = ledger::csv_writer(&npca_path)?;
    w.write_record(["epoch", "n95", "n99"])?;
    for (t, (a, b)) in rec.n95.iter().zip(&rec.n99).enumerate() {
        w.write_record([(t + 1).to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&npca_path, e))?;

    let dirs = pgd(&rec.log, 0.99);
    let overlap_path = dir.join("overlap.csv");
    write_matrix(&overlap_path, &overlap_matrix(&rec.log, &dirs), "pgd")?;
    let sim_path = dir.join("similarity.csv");
    write_matrix(&sim_path, &similarity_matrix(&rec.log), "epoch")?;

    let summary = format!(
        "centralized_analyze epochs={} n95={} n99={} final_train_loss={:.6}",
        rec.log.len(),
        rec.n95.last().copied().unwrap_or(0),
        rec.n99.last().copied().unwrap_or(0),
        rec.train_loss.last().copied().unwrap_or(f64::NAN),
    );
    Ok(RunReport {
        files: vec![npca_path, overlap_path, sim_path],
        summary,
    })
}

fn write_matrix(path: &Path, m: &[Vec<f64>], col_prefix: &str) -> Result<()> {
    let mut w = ledger::csv_writer(path)?;
    let cols = m.first().map_or(0, Vec::len);
    let mut header = vec!["epoch".to_string()];
    header.extend((1..=cols).map(|j| format!("{col_prefix}{j}")));
    w.write_record(&header)?;
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
