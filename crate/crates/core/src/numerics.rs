//! Flat-vector linear algebra and seeded random streams.
//!
//! Every reduction here runs sequentially, left to right, so two runs over the
//! same inputs produce bit-identical results no matter how the callers are
//! scheduled.

use std::ops::Index;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// Flattened model parameters (or a gradient of the same shape).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    /// Wraps `data`, rejecting empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("parameter vector must have dim >= 1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::new"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must have dim >= 1");
        Self {
            data: vec![0.0; dim],
        }
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Cosine of the angle between `self` and `other`, clamped to `[-1, 1]`.
    pub fn cosine_sim(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        let na = self.norm_sq();
        let nb = other.norm_sq();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm("cosine_sim"));
        }
        // sqrt(x·x) == x in binary floating point, so cos(a, a) is exactly 1
        // whenever the product neither overflows nor underflows.
        let prod = na * nb;
        let denom = if prod.is_normal() {
            prod.sqrt()
        } else {
            na.sqrt() * nb.sqrt()
        };
        let c = dot_slices(&self.data, &other.data) / denom;
        Ok(c.clamp(-1.0, 1.0))
    }

    /// Returns `y + alpha * x` where `self` plays the role of `y`.
    pub fn axpy(&self, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim(), x.dim())?;
        let data = self
            .data
            .iter()
            .zip(&x.data)
            .map(|(y, x)| y + alpha * x)
            .collect();
        ParamVector::from_vec_unchecked(data).ensure_finite("axpy")
    }

    /// In-place `self += alpha * x`.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        check_dim(self.dim(), x.dim())?;
        for (y, x) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * x;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector::from_vec_unchecked(self.data.iter().map(|v| alpha * v).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim(), other.dim())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector::from_vec_unchecked(data))
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim(), other.dim())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector::from_vec_unchecked(data))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.dim() == other.dim()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

/// Sequential left-to-right inner product.
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.dot(b)
}

pub fn norm_sq(a: &ParamVector) -> f64 {
    a.norm_sq()
}

pub fn cosine_sim(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.cosine_sim(b)
}

pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    y.axpy(alpha, x)
}

/// Stream ids reserved for non-worker roles. Worker `k` uses stream id `k`.
pub mod stream {
    pub const SERVER: u64 = 1 << 40;
    pub const DATA: u64 = SERVER + 1;
    pub const PARTITION: u64 = SERVER + 2;
    pub const TEST_DATA: u64 = SERVER + 3;
}

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's 64-bit stream
/// counter, so distinct ids never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
