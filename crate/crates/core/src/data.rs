//! Datasets, IDX loading and worker partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{Labels, Samples, Target};
use crate::numerics::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Labels,
    num_classes: usize,
}

impl Dataset {
    /// `num_classes == 0` marks a regression dataset.
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Labels, num_classes: usize) -> Result<Self> {
        if dim == 0 || !inputs.len().is_multiple_of(dim) {
            return Err(Error::invalid("dataset inputs not a multiple of dim"));
        }
        let n = inputs.len() / dim;
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{n} inputs but {} labels",
                labels.len()
            )));
        }
        match &labels {
            Labels::Classes(c) => {
                if num_classes == 0 {
                    return Err(Error::invalid(
                        "classification dataset needs num_classes >= 1",
                    ));
                }
                if let Some(bad) = c.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::invalid(format!(
                        "label {bad} >= num_classes {num_classes}"
                    )));
                }
            }
            Labels::Values { .. } => {
                if num_classes != 0 {
                    return Err(Error::invalid(
                        "regression dataset must have num_classes == 0",
                    ));
                }
            }
        }
        Ok(Self {
            inputs,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        match &self.labels {
            Labels::Classes(c) => Some(c[i]),
            Labels::Values { .. } => None,
        }
    }

    /// Splits off samples `[at, n)` into a second dataset.
    pub fn split_at(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.len() {
            return Err(Error::invalid(format!(
                "split point {at} outside (0, {})",
                self.len()
            )));
        }
        let (xa, xb) = self.inputs.split_at(at * self.dim);
        let (la, lb) = match &self.labels {
            Labels::Classes(c) => (
                Labels::Classes(c[..at].to_vec()),
                Labels::Classes(c[at..].to_vec()),
            ),
            Labels::Values { data, dim } => (
                Labels::Values {
                    data: data[..at * dim].to_vec(),
                    dim: *dim,
                },
                Labels::Values {
                    data: data[at * dim..].to_vec(),
                    dim: *dim,
                },
            ),
        };
        Ok((
            Dataset::new(xa.to_vec(), self.dim, la, self.num_classes)?,
            Dataset::new(xb.to_vec(), self.dim, lb, self.num_classes)?,
        ))
    }

    /// Keeps the first `n` samples.
    pub fn truncate(mut self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self;
        }
        self.inputs.truncate(n * self.dim);
        match &mut self.labels {
            Labels::Classes(c) => c.truncate(n),
            Labels::Values { data, dim } => data.truncate(n * *dim),
        }
        self
    }

    /// View over `indices`, which are sorted ascending so per-sample
    /// accumulation always happens in index order.
    pub fn subset(&self, mut indices: Vec<usize>) -> Subset<'_> {
        indices.sort_unstable();
        Subset { ds: self, indices }
    }
}

impl Samples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    fn target(&self, i: usize) -> Target<'_> {
        self.labels.target(i)
    }
}

#[derive(Clone, Debug)]
pub struct Subset<'a> {
    ds: &'a Dataset,
    indices: Vec<usize>,
}

impl Subset<'_> {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl Samples for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn input_dim(&self) -> usize {
        self.ds.dim
    }

    fn input(&self, i: usize) -> &[f64] {
        self.ds.input(self.indices[i])
    }

    fn target(&self, i: usize) -> Target<'_> {
        self.ds.target(self.indices[i])
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path,
            bytes,
            pos: 0,
        })
    }

    fn error(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let raw = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.error(self.pos, format!("truncated while reading {what}")))?;
        let v = u32::from_be_bytes(raw.try_into().expect("4-byte slice"));
        self.pos = end;
        Ok(v)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(self.error(
                0,
                format!("bad magic 0x{found:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if self.bytes.len() < end {
            return Err(self.error(
                self.bytes.len(),
                format!("truncated body: need {len} bytes from offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let mut img = IdxReader::open(images_path)?;
    img.magic(IDX_IMAGES_MAGIC)?;
    let n = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let dim = rows * cols;
    if n == 0 || dim == 0 {
        return Err(img.error(4, "empty image file"));
    }
    let inputs: Vec<f64> = img
        .body(n * dim)?
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();

    let mut lab = IdxReader::open(labels_path)?;
    lab.magic(IDX_LABELS_MAGIC)?;
    let count_offset = lab.pos;
    let n_labels = lab.u32("label count")? as usize;
    if n_labels != n {
        return Err(lab.error(
            count_offset,
            format!("label count {n_labels} does not match image count {n}"),
        ));
    }
    let labels: Vec<usize> = lab.body(n)?.iter().map(|&b| b as usize).collect();
    // MNIST-style files: ten classes unless the labels say otherwise.
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, dim, Labels::Classes(labels), num_classes)
}

/// Writes an IDX image/label pair. Pixel values are `round(255 * x)`.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    ds: &Dataset,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::invalid("rows * cols must equal dataset dim"));
    }
    let Labels::Classes(labels) = ds.labels() else {
        return Err(Error::invalid("IDX labels must be class indices"));
    };
    let mut img = Vec::with_capacity(16 + ds.inputs().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(
        ds.inputs()
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&c| c as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// One isotropic unit-variance Gaussian blob per class.
///
/// When `classes <= d` the centers are `separation/√2 · e_c`, so every pair of
/// centers is exactly `separation` apart. Otherwise centers are random
/// directions of the same radius. Sample `i` belongs to class `i % classes`.
pub fn synth_classification(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes == 0 || n < classes || d == 0 {
        return Err(Error::invalid(
            "synth_classification needs n >= classes >= 1 and d >= 1",
        ));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= d {
                let mut v = vec![0.0; d];
                v[c] = radius;
                v
            } else {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| radius * x / norm).collect()
            }
        })
        .collect();
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mu in &centers[c] {
            let z: f64 = StandardNormal.sample(rng);
            inputs.push(mu + z);
        }
        labels.push(c);
    }
    Dataset::new(inputs, d, Labels::Classes(labels), classes)
}

/// `y = W x + b + noise` with `W`, `b` and `x` standard normal.
pub fn synth_regression(
    n: usize,
    d: usize,
    outputs: usize,
    noise: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if n == 0 || d == 0 || outputs == 0 {
        return Err(Error::invalid(
            "synth_regression needs positive n, d, outputs",
        ));
    }
    let w: Vec<f64> = (0..outputs * d)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let b: Vec<f64> = (0..outputs).map(|_| StandardNormal.sample(rng)).collect();
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for o in 0..outputs {
            let mut y = b[o];
            for (wi, xi) in w[o * d..(o + 1) * d].iter().zip(&x) {
                y += wi * xi;
            }
            let e: f64 = StandardNormal.sample(rng);
            targets.push(y + noise * e);
        }
        inputs.extend(x);
    }
    Dataset::new(
        inputs,
        d,
        Labels::Values {
            data: targets,
            dim: outputs,
        },
        0,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    /// Every worker sees samples from exactly this many labels.
    LabelShard(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl Partition {
    pub fn from_shards(shards: Vec<Vec<usize>>) -> Result<Self> {
        let total: usize = shards.iter().map(Vec::len).sum();
        if shards.is_empty() || total == 0 {
            return Err(Error::invalid("partition must cover at least one sample"));
        }
        let weights = shards
            .iter()
            .map(|s| s.len() as f64 / total as f64)
            .collect();
        Ok(Self { shards, weights })
    }

    pub fn num_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn shard(&self, k: usize) -> &[usize] {
        &self.shards[k]
    }

    /// `ω_k = n_k / N`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Splits `ds` across `workers` shards.
///
/// `LabelShard(s)`: worker `k` owns labels `k·s, …, k·s + s − 1 (mod C)`; each
/// label's samples are shuffled and dealt evenly over the workers that own it.
/// Uneven residues go to the earlier shards.
pub fn partition(
    ds: &Dataset,
    workers: usize,
    mode: PartitionMode,
    rng: &mut RngStream,
) -> Result<Partition> {
    if workers == 0 {
        return Err(Error::invalid("need at least one worker"));
    }
    if workers > ds.len() {
        return Err(Error::invalid(format!(
            "{workers} workers but only {} samples",
            ds.len()
        )));
    }
    let shards = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(rng);
            deal(&idx, workers)
        }
        PartitionMode::LabelShard(s) => {
            let classes = ds.num_classes();
            let Labels::Classes(labels) = ds.labels() else {
                return Err(Error::invalid("label_shard partition needs class labels"));
            };
            if s == 0 || s > classes {
                return Err(Error::invalid(format!(
                    "label_shard({s}) needs 1 <= s <= {classes}"
                )));
            }
            if workers * s < classes {
                return Err(Error::invalid(format!(
                    "label_shard({s}) with {workers} workers leaves labels unassigned"
                )));
            }
            let mut owners: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for k in 0..workers {
                for j in 0..s {
                    owners[(k * s + j) % classes].push(k);
                }
            }
            let mut shards = vec![Vec::new(); workers];
            for (class, owners) in owners.iter().enumerate() {
                let mut idx: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == class).collect();
                idx.shuffle(rng);
                for (chunk, &k) in deal(&idx, owners.len()).into_iter().zip(owners) {
                    shards[k].extend(chunk);
                }
            }
            for shard in &mut shards {
                shard.sort_unstable();
            }
            shards
        }
    };
    Partition::from_shards(shards)
}

fn deal(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Draws a shuffled order over a shard for minibatch sampling.
pub(crate) fn shuffled(shard: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut order = shard.to_vec();
    order.shuffle(rng);
    order
}
