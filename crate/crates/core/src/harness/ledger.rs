//! Communication ledger and per-round metrics.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lbgm::{MessageKind, UplinkMessage};

/// `(floats, bits)` charged for one uplink message.
pub fn ledger_cost(msg: &UplinkMessage) -> (f64, u64) {
    let c = msg.cost();
    (c.floats, c.bits)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerRow {
    pub round: usize,
    pub worker: usize,
    pub floats: f64,
    pub bits: u64,
    pub kind: MessageKind,
}

/// Append-only record of every uplink message.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    rows: Vec<LedgerRow>,
    total_floats: f64,
    total_bits: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, worker: usize, msg: &UplinkMessage) {
        let (floats, bits) = ledger_cost(msg);
        self.rows.push(LedgerRow {
            round,
            worker,
            floats,
            bits,
            kind: msg.kind(),
        });
        self.total_floats += floats;
        self.total_bits += bits;
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn total_floats(&self) -> f64 {
        self.total_floats
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["round", "worker", "floats", "bits"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.worker.to_string(),
                r.floats.to_string(),
                r.bits.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: f64,
    /// Test accuracy for classifiers, test loss for regression.
    pub test_metric: f64,
    pub cum_floats: f64,
    pub cum_bits: u64,
    pub scalar_fraction: f64,
    pub delta_sq_proxy: Option<f64>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "train_loss",
    "test_metric",
    "cum_floats",
    "cum_bits",
    "scalar_fraction",
    "delta_sq_proxy",
];

/// One row per evaluated round, starting with the untrained model at round 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_rows(&mut w)?;
        w.into_inner()
            .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        self.write_rows(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.train_loss.to_string(),
                r.test_metric.to_string(),
                r.cum_floats.to_string(),
                r.cum_bits.to_string(),
                r.scalar_fraction.to_string(),
                r.delta_sq_proxy.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(())
    }

    /// Reads a table written by [`MetricsTable::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != METRICS_HEADER {
            return Err(Error::invalid(format!(
                "{}: not a metrics file",
                path.display()
            )));
        }
        let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
            rows.push(MetricsRow {
                round: rec[0].parse().map_err(|_| bad("round"))?,
                train_loss: f(1)?,
                test_metric: f(2)?,
                cum_floats: f(3)?,
                cum_bits: rec[4].parse().map_err(|_| bad("cum_bits"))?,
                scalar_fraction: f(5)?,
                delta_sq_proxy: if rec[6].is_empty() { None } else { Some(f(6)?) },
            });
        }
        Ok(Self { rows })
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{topk, Payload};
    use crate::numerics::ParamVector;

    #[test]
    fn cost_examples() {
        assert_eq!(ledger_cost(&UplinkMessage::scalar(0.3)), (1.0, 32));
        let g = ParamVector::new(vec![1.0; 1000]).unwrap();
        assert_eq!(
            ledger_cost(&UplinkMessage::full(g.clone())),
            (1000.0, 32000)
        );
        let sparse = Payload::Sparse(topk(&g, 100).unwrap());
        assert_eq!(
            ledger_cost(&UplinkMessage::from_payload(sparse)),
            (200.0, 6400)
        );
    }

    #[test]
    fn totals_track_rows() {
        let mut l = CommLedger::new();
        l.record(1, 0, &UplinkMessage::scalar(1.0));
        l.record(1, 1, &UplinkMessage::full(ParamVector::zeros(5)));
        assert_eq!(l.rows().len(), 2);
        assert_eq!(l.total_floats(), 6.0);
        assert_eq!(l.total_bits(), 192);
        assert_eq!(l.rows()[0].kind, MessageKind::ScalarLbc);
    }

    #[test]
    fn metrics_round_trip() {
        let t = MetricsTable {
            rows: vec![
                MetricsRow {
                    round: 0,
                    train_loss: 1.0 / 7.0,
                    test_metric: 0.1,
                    cum_floats: 0.0,
                    cum_bits: 0,
                    scalar_fraction: 0.0,
                    delta_sq_proxy: None,
                },
                MetricsRow {
                    round: 1,
                    train_loss: 1.5,
                    test_metric: 0.75,
                    cum_floats: 20.5,
                    cum_bits: 656,
                    scalar_fraction: 0.5,
                    delta_sq_proxy: Some(1e-3),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "round,train_loss,test_metric,cum_floats,cum_bits,scalar_fraction,delta_sq_proxy\n"
        ));
        assert_eq!(MetricsTable::read_csv(&path).unwrap(), t);
        assert_eq!(t.to_csv_bytes().unwrap(), text.into_bytes());
    }
}
