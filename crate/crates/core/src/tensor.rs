//! Dense vectors and matrices in `f64`, plus the seeded generator every
//! experiment draws from.
//!
//! The generator is ChaCha8 (via `rand_chacha`) seeded from a single `u64`.
//! Uniform integers use Lemire's multiply-and-reject method, uniform floats
//! take the top 53 bits of a draw, and normals use the Box-Muller transform.
//! None of these depend on platform or on the `rand` distribution code, so a
//! seed reproduces the same stream everywhere.

use std::ops::{Deref, DerefMut};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

/// Owned vector of `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(pub Vec<f64>);

impl Vec64 {
    pub fn zeros(n: usize) -> Self {
        Vec64(vec![0.0; n])
    }

    /// Canonical basis vector `e_i` in `n` dimensions.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[i] = 1.0;
        v
    }

    pub fn dot(&self, other: &[f64]) -> Result<f64> {
        check_dim(self.len(), other.len())?;
        Ok(self.iter().zip(other).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &[f64]) -> Result<()> {
        check_dim(self.len(), other.len())?;
        self.iter_mut().zip(other).for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for Vec64 {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Vec64 {
    fn from(v: Vec<f64>) -> Self {
        Vec64(v)
    }
}

impl From<&[f64]> for Vec64 {
    fn from(v: &[f64]) -> Self {
        Vec64(v.to_vec())
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid("matrix dimensions must be positive");
        }
        check_dim(rows * cols, data.len())?;
        Ok(Mat64 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec64]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("matrix needs at least one row");
        };
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::from_row_major(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_row_major(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Matrix-vector product `m · v`.
pub fn matvec(m: &Mat64, v: &[f64]) -> Result<Vec64> {
    check_dim(m.cols, v.len())?;
    Ok(Vec64(
        (0..m.rows)
            .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect(),
    ))
}

/// Squared Euclidean distance `‖a − b‖²`.
pub fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(sq_dist_unchecked(a, b))
}

#[inline]
pub(crate) fn sq_dist_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Seeded deterministic generator. Single owner; split seeds to parallelize.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let wide = (self.next_u64() as u128) * (n as u128);
            if (wide as u64) >= threshold {
                return (wide >> 64) as usize;
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// First `k` entries of a uniform random permutation of `0..m`.
    pub fn shuffle_k(&mut self, m: usize, k: usize) -> Result<Vec<usize>> {
        if k > m {
            return invalid(format!("cannot draw {k} distinct indices from {m}"));
        }
        let mut idx: Vec<usize> = (0..m).collect();
        partial_shuffle(self, &mut idx, k);
        idx.truncate(k);
        Ok(idx)
    }

    /// `k` distinct elements of `pool`, in sampled order.
    pub fn choose_k<T: Copy>(&mut self, pool: &[T], k: usize) -> Result<Vec<T>> {
        if k > pool.len() {
            return invalid(format!(
                "cannot draw {k} distinct items from {}",
                pool.len()
            ));
        }
        let mut items = pool.to_vec();
        partial_shuffle(self, &mut items, k);
        items.truncate(k);
        Ok(items)
    }
}

// Fisher-Yates over the first k slots.
fn partial_shuffle<T>(rng: &mut Rng, items: &mut [T], k: usize) {
    let m = items.len();
    for i in 0..k {
        let j = i + rng.below(m - i);
        items.swap(i, j);
    }
}

/// Free-function form of [`Rng::shuffle_k`].
pub fn rng_shuffle_k(rng: &mut Rng, m: usize, k: usize) -> Result<Vec<usize>> {
    rng.shuffle_k(m, k)
}
