//! Dense vector/matrix arithmetic and deterministic randomness.
//!
//! Everything downstream (the embedder, the losses, the regularizer, the
//! protocol simulator) is built on the handful of primitives in this module,
//! so they are kept deliberately small: slices of `f64`, a row-major
//! [`Matrix`], and a seeded [`RngState`] whose stream is identical across
//! platforms and runs.

use rand::distr::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as zero vectors.
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Tolerance used when checking that an input is already unit-norm.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("vector norm {norm:.3e} is at or below the zero tolerance {NORM_TOLERANCE:.0e}")]
    ZeroNorm { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector is not unit-norm: |v| = {norm}")]
    NotNormalized { norm: f64 },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// Euclidean norm, accumulated with compensation.
pub fn norm(v: &[f64]) -> f64 {
    compensated_sum(v.iter().map(|x| x * x)).sqrt()
}

/// Scale `v` to unit Euclidean norm.
///
/// Fails with [`MathError::ZeroNorm`] when the norm is at or below
/// [`NORM_TOLERANCE`]; below that double precision cannot recover a reliable
/// direction.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, MathError> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(MathError::NonFinite { context: "normalize" });
    }
    if n <= NORM_TOLERANCE {
        return Err(MathError::ZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Inner product with a compensated (Neumaier) accumulator.
///
/// The compensation keeps round-off far below the 1e-9 reproducibility the
/// bound checkers rely on, even at dimension 512 and beyond.
pub fn dot(u: &[f64], v: &[f64]) -> Result<f64, MathError> {
    if u.len() != v.len() {
        return Err(MathError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    Ok(compensated_sum(u.iter().zip(v).map(|(a, b)| a * b)))
}

/// Cosine distance `1 - u.v` between unit vectors, clamped to `[0, 2]`.
///
/// Both inputs must already be unit-norm (checked to [`UNIT_TOLERANCE`]); the
/// clamp absorbs rounding so the hinge terms downstream always see the closed
/// interval.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, MathError> {
    for w in [u, v] {
        let n = norm(w);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(MathError::NotNormalized { norm: n });
        }
    }
    let d = 1.0 - dot(u, v)?;
    Ok(d.clamp(0.0, 2.0))
}

/// Cosine distance computed directly from entries, without the unit-norm
/// check or the clamp. Used where the caller owns the invariant and the
/// gradient must match the literal `1 - u.v` expression.
pub fn cosine_distance_unchecked(u: &[f64], v: &[f64]) -> f64 {
    1.0 - u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
}

/// Neumaier summation: running sum plus a correction term.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for t in terms {
        let next = sum + t;
        if sum.abs() >= t.abs() {
            c += (sum - next) + t;
        } else {
            c += (t - next) + sum;
        }
        sum = next;
    }
    sum + c
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    /// Build from row-major values; the value count must match the shape.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MathError> {
        if values.len() != rows * cols {
            return Err(MathError::DimensionMismatch { left: rows * cols, right: values.len() });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MathError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MathError::DimensionMismatch { left: cols, right: r.len() });
            }
            values.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += coeff * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, coeff: f64) -> Result<(), MathError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MathError::DimensionMismatch {
                left: self.values.len(),
                right: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += coeff * b;
        }
        Ok(())
    }
}

/// Deterministic seeded randomness.
///
/// Backed by the ChaCha8 counter-based stream: the same seed yields the same
/// sequence on every platform, which is what lets the acceptance suite compare
/// whole training runs byte for byte. A state is single-owner; concurrent
/// consumers fork their own child via [`RngState::derive`].
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fork a child stream. Children with distinct labels are independent of
    /// each other and of the parent's own stream position.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(splitmix64(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.sample(Uniform::new(0, n).expect("non-empty range"))
    }

    /// Sample `amount` distinct indices from `[0, length)`, returned sorted.
    pub fn sample_without_replacement(&mut self, length: usize, amount: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.rng, length, amount).into_vec();
        picked.sort_unstable();
        picked
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
