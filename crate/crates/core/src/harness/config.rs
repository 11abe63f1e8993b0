//! Experiment configuration and its line-oriented text format.
//!
//! ```text
//! # top-level keys come before any section
//! algorithm = lbgm
//! seed = 1
//!
//! [data]
//! source = synthetic
//! partition = label_shard(3)
//!
//! [train]
//! workers = 10
//! rounds = 200
//! eta = 0.05
//!
//! [lbgm]
//! delta = 0.2
//! ```
//!
//! Unknown sections or keys, duplicate keys and malformed values are errors
//! that name the key and the line. Command-line overrides report line 0.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::compress::SignRule;
use crate::data::PartitionMode;
use crate::error::{Error, Result};
use crate::models::ModelKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Vanilla,
    Lbgm,
    LbgmSampled,
    TopK,
    TopKLbgm,
    RankR,
    RankRLbgm,
    Sign,
    SignLbgm,
    CentralizedAnalyze,
}

impl Algorithm {
    pub const ALL: [Algorithm; 10] = [
        Algorithm::Vanilla,
        Algorithm::Lbgm,
        Algorithm::LbgmSampled,
        Algorithm::TopK,
        Algorithm::TopKLbgm,
        Algorithm::RankR,
        Algorithm::RankRLbgm,
        Algorithm::Sign,
        Algorithm::SignLbgm,
        Algorithm::CentralizedAnalyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::Lbgm => "lbgm",
            Algorithm::LbgmSampled => "lbgm_sampled",
            Algorithm::TopK => "topk",
            Algorithm::TopKLbgm => "topk_lbgm",
            Algorithm::RankR => "rank_r",
            Algorithm::RankRLbgm => "rank_r_lbgm",
            Algorithm::Sign => "sign",
            Algorithm::SignLbgm => "sign_lbgm",
            Algorithm::CentralizedAnalyze => "centralized_analyze",
        }
    }

    pub fn uses_lbgm(self) -> bool {
        matches!(
            self,
            Algorithm::Lbgm
                | Algorithm::LbgmSampled
                | Algorithm::TopKLbgm
                | Algorithm::RankRLbgm
                | Algorithm::SignLbgm
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs, one per class.
    Synthetic,
    SyntheticRegression,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    /// Regression target noise.
    pub noise: f64,
    /// Regression output width.
    pub outputs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaRule {
    Constant(f64),
    /// `1/√(τT)`.
    Corollary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Metrics CSV of a reference run for the savings line in the summary.
    pub baseline: Option<PathBuf>,

    pub model_kind: ModelKind,
    pub hidden: usize,

    pub data: DataSpec,
    pub partition: PartitionMode,

    pub workers: usize,
    pub rounds: usize,
    /// `None` means one pass over the largest shard.
    pub tau: Option<usize>,
    pub eta: EtaRule,
    pub batch_size: usize,

    pub delta: f64,
    pub monitor_delta_sq: bool,
    pub sample_fraction: f64,

    pub k_frac: f64,
    pub rank: usize,
    pub error_feedback: bool,
    pub sign_rule: SignRule,
}

impl ExperimentConfig {
    /// Defaults for everything but the algorithm.
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            seed: 0,
            out_dir: PathBuf::from("out"),
            baseline: None,
            model_kind: ModelKind::Mlp1h,
            hidden: 64,
            data: DataSpec {
                source: DataSource::Synthetic,
                n_train: 2000,
                n_test: 500,
                dim: 20,
                classes: 10,
                separation: 3.0,
                noise: 0.1,
                outputs: 1,
            },
            partition: PartitionMode::Iid,
            workers: 10,
            rounds: 200,
            tau: None,
            eta: EtaRule::Constant(0.05),
            batch_size: 32,
            delta: 0.2,
            monitor_delta_sq: false,
            sample_fraction: 0.5,
            k_frac: 0.1,
            rank: 2,
            error_feedback: true,
            sign_rule: SignRule::Mean,
        }
    }
}

const SECTIONS: [&str; 6] = ["", "model", "data", "train", "lbgm", "compress"];

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw `(section, key) -> value` pairs before validation.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(lineno, line, "unterminated section header"))?
                    .trim();
                if name.is_empty() || !SECTIONS.contains(&name) {
                    return Err(config_err(lineno, name, "unknown section"));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(lineno, line, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(config_err(lineno, key, "empty key"));
            }
            let slot = (section.clone(), key.to_string());
            if let Some(prev) = raw.entries.get(&slot) {
                return Err(config_err(
                    lineno,
                    &qualified(&section, key),
                    &format!("duplicate key (first set on line {})", prev.line),
                ));
            }
            raw.entries.insert(
                slot,
                Entry {
                    value: value.trim().to_string(),
                    line: lineno,
                },
            );
        }
        Ok(raw)
    }

    /// Applies `section.key=value` (or `key=value` for top-level keys).
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| config_err(0, spec, "override must be key=value"))?;
        let (section, key) = match key.trim().split_once('.') {
            Some((s, k)) => (s.trim(), k.trim()),
            None => ("", key.trim()),
        };
        if !SECTIONS.contains(&section) {
            return Err(config_err(0, section, "unknown section"));
        }
        self.entries.insert(
            (section.to_string(), key.to_string()),
            Entry {
                value: value.trim().to_string(),
                line: 0,
            },
        );
        Ok(())
    }

    pub fn into_config(self) -> Result<ExperimentConfig> {
        let mut reader = Reader {
            entries: self.entries,
        };
        let algorithm: Algorithm = reader
            .take("", "algorithm")?
            .ok_or_else(|| config_err(0, "algorithm", "missing required key"))?;
        let mut cfg = ExperimentConfig::new(algorithm);

        reader.set("", "seed", &mut cfg.seed)?;
        if let Some(out) = reader.take_str("", "out") {
            cfg.out_dir = PathBuf::from(out.value);
        }
        cfg.baseline = reader
            .take_str("", "baseline")
            .map(|e| PathBuf::from(e.value));

        if let Some(e) = reader.take_str("model", "kind") {
            cfg.model_kind = parse_model_kind(&e.value).ok_or_else(|| {
                config_err(
                    e.line,
                    "model.kind",
                    "expected linear_regression, softmax_classifier or mlp1h",
                )
            })?;
        }
        reader.set_checked(
            "model",
            "hidden",
            &mut cfg.hidden,
            |&h| h >= 1,
            "must be >= 1",
        )?;

        let source = reader.take_str("data", "source");
        let paths: Vec<Option<Entry>> =
            ["train_images", "train_labels", "test_images", "test_labels"]
                .iter()
                .map(|k| reader.take_str("data", k))
                .collect();
        cfg.data.source = match source.as_ref().map(|e| e.value.as_str()) {
            None | Some("synthetic") => DataSource::Synthetic,
            Some("synthetic_regression") => DataSource::SyntheticRegression,
            Some("idx") => {
                let line = source.as_ref().map_or(0, |e| e.line);
                let mut it = paths.into_iter().zip([
                    "train_images",
                    "train_labels",
                    "test_images",
                    "test_labels",
                ]);
                let mut next = || {
                    let (entry, name) = it.next().expect("four paths");
                    entry.map(|e| PathBuf::from(e.value)).ok_or_else(|| {
                        config_err(line, &format!("data.{name}"), "required when source = idx")
                    })
                };
                DataSource::Idx {
                    train_images: next()?,
                    train_labels: next()?,
                    test_images: next()?,
                    test_labels: next()?,
                }
            }
            Some(other) => {
                return Err(config_err(
                    source.as_ref().map_or(0, |e| e.line),
                    "data.source",
                    &format!("unknown source `{other}`"),
                ))
            }
        };
        reader.set_checked(
            "data",
            "n_train",
            &mut cfg.data.n_train,
            |&n| n >= 1,
            "must be >= 1",
        )?;
        reader.set_checked(
            "data",
            "n_test",
            &mut cfg.data.n_test,
            |&n| n >= 1,
            "must be >= 1",
        )?;
        reader.set_checked(
            "data",
            "dim",
            &mut cfg.data.dim,
            |&n| n >= 1,
            "must be >= 1",
        )?;
        reader.set_checked(
            "data",
            "classes",
            &mut cfg.data.classes,
            |&n| n >= 2,
            "must be >= 2",
        )?;
        reader.set_checked(
            "data",
            "separation",
            &mut cfg.data.separation,
            |s| s.is_finite() && *s >= 0.0,
            "must be >= 0",
        )?;
        reader.set_checked(
            "data",
            "noise",
            &mut cfg.data.noise,
            |s| s.is_finite() && *s >= 0.0,
            "must be >= 0",
        )?;
        reader.set_checked(
            "data",
            "outputs",
            &mut cfg.data.outputs,
            |&n| n >= 1,
            "must be >= 1",
        )?;
        if let Some(e) = reader.take_str("data", "partition") {
            cfg.partition = parse_partition(&e.value).ok_or_else(|| {
                config_err(e.line, "data.partition", "expected iid or label_shard(<s>)")
            })?;
        }

        reader.set_checked(
            "train",
            "workers",
            &mut cfg.workers,
            |&k| k >= 1,
            "must be >= 1",
        )?;
        reader.set("train", "rounds", &mut cfg.rounds)?;
        if let Some(e) = reader.take_str("train", "tau") {
            cfg.tau = if e.value == "auto" {
                None
            } else {
                match e.value.parse::<usize>() {
                    Ok(t) if t >= 1 => Some(t),
                    _ => {
                        return Err(config_err(
                            e.line,
                            "train.tau",
                            "expected a positive integer or `auto`",
                        ))
                    }
                }
            };
        }
        if let Some(e) = reader.take_str("train", "eta") {
            cfg.eta = if e.value == "corollary" {
                EtaRule::Corollary
            } else {
                match e.value.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => EtaRule::Constant(v),
                    _ => {
                        return Err(config_err(
                            e.line,
                            "train.eta",
                            "expected a positive number or `corollary`",
                        ))
                    }
                }
            };
        }
        reader.set_checked(
            "train",
            "batch_size",
            &mut cfg.batch_size,
            |&b| b >= 1,
            "must be >= 1",
        )?;

        reader.set_checked(
            "lbgm",
            "delta",
            &mut cfg.delta,
            |d| (0.0..=1.0).contains(d),
            "must be in [0, 1]",
        )?;
        reader.set("lbgm", "monitor_delta_sq", &mut cfg.monitor_delta_sq)?;
        reader.set_checked(
            "lbgm",
            "sample_fraction",
            &mut cfg.sample_fraction,
            |f| *f > 0.0 && *f <= 1.0,
            "must be in (0, 1]",
        )?;

        reader.set_checked(
            "compress",
            "k_frac",
            &mut cfg.k_frac,
            |f| *f > 0.0 && *f <= 1.0,
            "must be in (0, 1]",
        )?;
        reader.set_checked(
            "compress",
            "rank",
            &mut cfg.rank,
            |&r| r >= 1,
            "must be >= 1",
        )?;
        reader.set("compress", "error_feedback", &mut cfg.error_feedback)?;
        if let Some(e) = reader.take_str("compress", "sign_rule") {
            cfg.sign_rule = match e.value.as_str() {
                "mean" => SignRule::Mean,
                "majority" => SignRule::Majority,
                _ => {
                    return Err(config_err(
                        e.line,
                        "compress.sign_rule",
                        "expected mean or majority",
                    ))
                }
            };
        }

        if let Some(((section, key), entry)) = reader.entries.into_iter().next() {
            return Err(config_err(
                entry.line,
                &qualified(&section, &key),
                "unknown key",
            ));
        }
        validate(&cfg)?;
        Ok(cfg)
    }
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let regression_data = cfg.data.source == DataSource::SyntheticRegression;
    if cfg.model_kind.is_classifier() == regression_data {
        return Err(config_err(
            0,
            "model.kind",
            &format!("{} does not match the data source", cfg.model_kind.name()),
        ));
    }
    if let PartitionMode::LabelShard(s) = cfg.partition {
        if regression_data {
            return Err(config_err(
                0,
                "data.partition",
                "label_shard needs class labels",
            ));
        }
        if cfg.data.source == DataSource::Synthetic && s > cfg.data.classes {
            return Err(config_err(
                0,
                "data.partition",
                "shard label count exceeds data.classes",
            ));
        }
    }
    if cfg.data.source == DataSource::Synthetic && cfg.data.n_train < cfg.data.classes {
        return Err(config_err(0, "data.n_train", "must be >= data.classes"));
    }
    Ok(())
}

/// Parses a full config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    RawConfig::parse(text)?.into_config()
}

fn parse_model_kind(s: &str) -> Option<ModelKind> {
    match s {
        "linear_regression" => Some(ModelKind::LinearRegression),
        "softmax_classifier" => Some(ModelKind::SoftmaxClassifier),
        "mlp1h" => Some(ModelKind::Mlp1h),
        _ => None,
    }
}

fn parse_partition(s: &str) -> Option<PartitionMode> {
    if s == "iid" {
        return Some(PartitionMode::Iid);
    }
    let inner = s.strip_prefix("label_shard(")?.strip_suffix(')')?;
    match inner.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Some(PartitionMode::LabelShard(n)),
        _ => None,
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn config_err(line: usize, key: &str, message: &str) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.to_string(),
    }
}

struct Reader {
    entries: BTreeMap<(String, String), Entry>,
}

impl Reader {
    fn take_str(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn take<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.take_str(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                config_err(
                    e.line,
                    &qualified(section, key),
                    &format!("`{}`: {err}", e.value),
                )
            }),
        }
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_checked<T: FromStr>(
        &mut self,
        section: &str,
        key: &str,
        slot: &mut T,
        ok: impl Fn(&T) -> bool,
        message: &str,
    ) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        let line = self
            .entries
            .get(&(section.to_string(), key.to_string()))
            .map(|e| e.line);
        if let Some(v) = self.take::<T>(section, key)? {
            if !ok(&v) {
                return Err(config_err(
                    line.unwrap_or(0),
                    &qualified(section, key),
                    message,
                ));
            }
            *slot = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("algorithm = lbgm\n").unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Lbgm);
        assert_eq!(cfg.delta, 0.2);
        assert_eq!(cfg.k_frac, 0.1);
        assert_eq!(cfg.rank, 2);
        assert_eq!(cfg.workers, 10);
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.eta, EtaRule::Constant(0.05));
        assert_eq!(cfg.tau, None);
    }

    #[test]
    fn full_config_parses() {
        let text = "\
# comment
algorithm = topk_lbgm   # trailing comment
seed = 7
out = /tmp/x

[model]
kind = softmax_classifier

[data]
source = synthetic
n_train = 300
classes = 5
partition = label_shard(2)

[train]
workers = 4
rounds = 3
tau = 2
eta = corollary
batch_size = 8

[lbgm]
delta = 0.05
monitor_delta_sq = true

[compress]
k_frac = 0.25
error_feedback = false
sign_rule = majority
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::TopKLbgm);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model_kind, ModelKind::SoftmaxClassifier);
        assert_eq!(cfg.partition, PartitionMode::LabelShard(2));
        assert_eq!(cfg.tau, Some(2));
        assert_eq!(cfg.eta, EtaRule::Corollary);
        assert!(cfg.monitor_delta_sq);
        assert!(!cfg.error_feedback);
        assert_eq!(cfg.sign_rule, SignRule::Majority);
    }

    fn err_of(text: &str) -> (usize, String, String) {
        match parse_config(text).unwrap_err() {
            Error::Config { line, key, message } => (line, key, message),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn delta_out_of_range() {
        let (line, key, _) = err_of("algorithm = lbgm\n[lbgm]\ndelta = 1.5\n");
        assert_eq!((line, key.as_str()), (3, "lbgm.delta"));
    }

    #[test]
    fn duplicate_key_names_line() {
        let (line, key, msg) = err_of("algorithm = lbgm\n[train]\nrounds = 3\nrounds = 4\n");
        assert_eq!((line, key.as_str()), (4, "train.rounds"));
        assert!(msg.contains("line 3"));
    }

    #[test]
    fn other_errors() {
        assert_eq!(err_of("seed = 1\n").1, "algorithm");
        assert_eq!(err_of("algorithm = gossip\n").1, "algorithm");
        let (line, key, _) = err_of("algorithm = lbgm\n[train]\nspeed = 3\n");
        assert_eq!((line, key.as_str()), (3, "train.speed"));
        assert_eq!(err_of("algorithm = lbgm\n[nope]\n").0, 2);
        assert_eq!(err_of("algorithm = lbgm\nnonsense\n").0, 2);
        assert_eq!(
            err_of("algorithm = lbgm\n[train]\nworkers = -1\n").1,
            "train.workers"
        );
        assert_eq!(
            err_of("algorithm = lbgm\n[model]\nkind = linear_regression\n").1,
            "model.kind"
        );
        assert_eq!(
            err_of("algorithm = lbgm\n[data]\npartition = shards\n").1,
            "data.partition"
        );
    }

    #[test]
    fn overrides_replace_values() {
        let mut raw = RawConfig::parse("algorithm = vanilla\n[lbgm]\ndelta = 0.1\n").unwrap();
        raw.set_override("lbgm.delta=0.3").unwrap();
        raw.set_override("algorithm=lbgm").unwrap();
        let cfg = raw.into_config().unwrap();
        assert_eq!(cfg.delta, 0.3);
        assert_eq!(cfg.algorithm, Algorithm::Lbgm);

        let mut raw = RawConfig::parse("algorithm = vanilla\n").unwrap();
        raw.set_override("train.rounds=x").unwrap();
        match raw.into_config().unwrap_err() {
            Error::Config { line, key, .. } => {
                assert_eq!((line, key.as_str()), (0, "train.rounds"))
            }
            e => panic!("unexpected {e}"),
        }
    }
}
