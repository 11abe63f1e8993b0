//! Gradient compressors and LBGM stacking.
//!
//! Every payload densifies back to a flat vector of the original dimension;
//! when LBGM is stacked on a compressor, the gate compares these densified
//! vectors instead of raw gradients.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::lbgm::{gate, Cost, GateDecision, LbgmConfig, UplinkMessage, FLOAT_BITS};
use crate::models::BlockShape;
use crate::numerics::ParamVector;

/// Sparse `(index, value)` pairs over a vector of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePayload {
    indices: Vec<usize>,
    values: Vec<f64>,
    dim: usize,
}

impl SparsePayload {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, dim: usize) -> Result<Self> {
        check_dim(indices.len(), values.len())?;
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= dim) {
            return Err(Error::invalid(
                "sparse indices must be strictly increasing and < dim",
            ));
        }
        Ok(Self {
            indices,
            values,
            dim,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn densify(&self) -> ParamVector {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        ParamVector::from_vec_unchecked(out)
    }
}

/// One bit per coordinate: set means `+1`, clear means `−1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignPayload {
    words: Vec<u64>,
    dim: usize,
}

impl SignPayload {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn densify(&self) -> ParamVector {
        ParamVector::from_vec_unchecked(
            (0..self.dim)
                .map(|i| if self.is_positive(i) { 1.0 } else { -1.0 })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockPayload {
    /// `us` is `rows × rank` (left vectors scaled by singular values), `v` is
    /// `cols × rank`, both row-major.
    Factors {
        rows: usize,
        cols: usize,
        rank: usize,
        us: Vec<f64>,
        v: Vec<f64>,
    },
    Dense(Vec<f64>),
}

impl BlockPayload {
    fn floats(&self) -> usize {
        match self {
            BlockPayload::Factors {
                rows, cols, rank, ..
            } => rank * (rows + cols),
            BlockPayload::Dense(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<f64>) {
        match self {
            BlockPayload::Factors {
                rows,
                cols,
                rank,
                us,
                v,
            } => {
                for i in 0..*rows {
                    for j in 0..*cols {
                        let mut acc = 0.0;
                        for r in 0..*rank {
                            acc += us[i * rank + r] * v[j * rank + r];
                        }
                        out.push(acc);
                    }
                }
            }
            BlockPayload::Dense(v) => out.extend_from_slice(v),
        }
    }
}

/// Per-block low-rank factors, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPayload {
    blocks: Vec<BlockPayload>,
    dim: usize,
}

impl LowRankPayload {
    pub fn blocks(&self) -> &[BlockPayload] {
        &self.blocks
    }

    pub fn densify(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            b.write(&mut out);
        }
        ParamVector::from_vec_unchecked(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(ParamVector),
    Sparse(SparsePayload),
    Sign(SignPayload),
    LowRank(LowRankPayload),
}

impl Payload {
    pub fn densify(&self) -> ParamVector {
        match self {
            Payload::Dense(v) => v.clone(),
            Payload::Sparse(s) => s.densify(),
            Payload::Sign(s) => s.densify(),
            Payload::LowRank(l) => l.densify(),
        }
    }

    pub fn cost(&self) -> Cost {
        match self {
            Payload::Dense(v) => Cost::floats(v.dim()),
            // index and value, one float-equivalent each
            Payload::Sparse(s) => Cost::floats(2 * s.indices.len()),
            Payload::Sign(s) => Cost {
                floats: s.dim as f64 / FLOAT_BITS as f64,
                bits: s.dim as u64,
            },
            Payload::LowRank(l) => Cost::floats(l.blocks.iter().map(BlockPayload::floats).sum()),
        }
    }
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
pub fn topk(g: &ParamVector, k: usize) -> Result<SparsePayload> {
    let m = g.dim();
    if k == 0 || k > m {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {m}, got {k}"
        )));
    }
    let v = g.as_slice();
    let mut idx: Vec<usize> = (0..m).collect();
    let by_magnitude = |&a: &usize, &b: &usize| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b));
    if k < m {
        idx.select_nth_unstable_by(k - 1, by_magnitude);
        idx.truncate(k);
    }
    idx.sort_unstable();
    let values = idx.iter().map(|&i| v[i]).collect();
    SparsePayload::new(idx, values, m)
}

/// `sign(g_i)` with `sign(0) = +1`.
pub fn sign_compress(g: &ParamVector) -> SignPayload {
    let dim = g.dim();
    let mut words = vec![0u64; dim.div_ceil(64)];
    for (i, &x) in g.as_slice().iter().enumerate() {
        if x >= 0.0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    SignPayload { words, dim }
}

/// Best rank-`r` approximation of every matrix block (vector blocks pass
/// through dense). `r` is clamped per block to `min(rows, cols)`.
pub fn rank_r(g: &ParamVector, shapes: &[BlockShape], r: usize) -> Result<LowRankPayload> {
    if r == 0 {
        return Err(Error::invalid("rank must be >= 1"));
    }
    let total: usize = shapes.iter().map(BlockShape::len).sum();
    check_dim(total, g.dim())?;
    let mut blocks = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let slice = &g.as_slice()[shape.range()];
        if !shape.is_matrix() {
            blocks.push(BlockPayload::Dense(slice.to_vec()));
            continue;
        }
        blocks.push(low_rank_block(slice, shape.rows, shape.cols, r));
    }
    Ok(LowRankPayload {
        blocks,
        dim: g.dim(),
    })
}

fn low_rank_block(slice: &[f64], rows: usize, cols: usize, r: usize) -> BlockPayload {
    let rank = r.min(rows.min(cols));
    let svd = DMatrix::from_row_slice(rows, cols, slice).svd(true, true);
    let u = svd.u.as_ref().expect("left vectors requested");
    let vt = svd.v_t.as_ref().expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut us = vec![0.0; rows * rank];
    let mut v = vec![0.0; cols * rank];
    for (slot, &c) in order.iter().take(rank).enumerate() {
        let sigma = svd.singular_values[c];
        // first nonzero entry of each left vector is positive
        let flip = u
            .column(c)
            .iter()
            .find(|x| **x != 0.0)
            .is_some_and(|x| *x < 0.0);
        let s = if flip { -1.0 } else { 1.0 };
        for i in 0..rows {
            us[i * rank + slot] = s * sigma * u[(i, c)];
        }
        for j in 0..cols {
            v[j * rank + slot] = s * vt[(c, j)];
        }
    }
    BlockPayload::Factors {
        rows,
        cols,
        rank,
        us,
        v,
    }
}

/// Error feedback: compresses `g + residual` and carries what was dropped.
pub fn ef_wrap<F>(
    residual: &ParamVector,
    g: &ParamVector,
    compress: F,
) -> Result<(Payload, ParamVector)>
where
    F: FnOnce(&ParamVector) -> Result<Payload>,
{
    let p = g.add(residual)?;
    let c = compress(&p)?;
    let new_residual = p.sub(&c.densify())?;
    Ok((c, new_residual))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Compressor {
    Identity,
    TopK {
        k: usize,
    },
    RankR {
        rank: usize,
        shapes: Vec<BlockShape>,
    },
    Sign,
}

impl Compressor {
    /// `k = round(k_frac · M)`, at least 1.
    pub fn topk_fraction(k_frac: f64, dim: usize) -> Self {
        let k = ((k_frac * dim as f64).round() as usize).clamp(1, dim);
        Compressor::TopK { k }
    }

    pub fn compress(&self, g: &ParamVector) -> Result<Payload> {
        Ok(match self {
            Compressor::Identity => Payload::Dense(g.clone()),
            Compressor::TopK { k } => Payload::Sparse(topk(g, *k)?),
            Compressor::RankR { rank, shapes } => Payload::LowRank(rank_r(g, shapes, *rank)?),
            Compressor::Sign => Payload::Sign(sign_compress(g)),
        })
    }
}

/// Server rule for sign-compressed rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignRule {
    /// Weighted mean of the reconstructed vectors.
    #[default]
    Mean,
    /// Sign of the weighted sum.
    Majority,
}

/// Runs the LBGM gate on a compressed gradient against the stored compressed
/// LBG. Full sends carry the compressor's payload and cost.
pub fn stack_lbgm(
    payload: Payload,
    compressed_lbg: Option<&ParamVector>,
    cfg: &LbgmConfig,
) -> Result<UplinkMessage> {
    stack_with_gate(payload, compressed_lbg, cfg).map(|(msg, _, _)| msg)
}

/// As [`stack_lbgm`], also returning the gate decision and the densified
/// payload that becomes the new LBG on a full send.
pub(crate) fn stack_with_gate(
    payload: Payload,
    compressed_lbg: Option<&ParamVector>,
    cfg: &LbgmConfig,
) -> Result<(UplinkMessage, GateDecision, ParamVector)> {
    let dense = payload.densify();
    let decision = gate(&dense, compressed_lbg, cfg)?;
    let msg = match decision {
        GateDecision::Scalar { rho, .. } => UplinkMessage::scalar(rho),
        GateDecision::Full { .. } => UplinkMessage::from_payload(payload),
    };
    Ok((msg, decision, dense))
}
