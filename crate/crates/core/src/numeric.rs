//! Deterministic numeric primitives shared by every other module.
//!
//! Everything is `f64`. Gaussian draws come from [`SeededRng`], a ChaCha20
//! stream keyed by `(seed, stream)` and turned into normals with the
//! Box–Muller transform. The transform is part of the golden-seed test surface
//! and must not be swapped for another sampler.

use std::f64::consts::PI;
use std::ops::Deref;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// A finite vector of `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Vec64"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Crate-internal constructor for values already known to be finite.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Vec64> for Vec<f64> {
    fn from(v: Vec64) -> Self {
        v.0
    }
}

/// Row-major finite matrix. Serialized as a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Mat64 {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<Mat64> for Vec<Vec<f64>> {
    fn from(m: Mat64) -> Self {
        m.to_rows()
    }
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(shape(format!("{rows}x{cols} values"), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Mat64"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(shape(format!("row length {cols}"), bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// Seeded random stream. Identical `(seed, stream)` and call sequence yield
/// identical outputs; instances are single-owner.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent stream derived from this one's seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box–Muller, both outputs used).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Source of isotropic Gaussian noise. The optimizers take this trait so
/// tests can script or observe the draws.
pub trait GaussianSource {
    /// `dim` i.i.d. draws from N(0, std²).
    fn gaussian_vec(&mut self, dim: usize, std: f64) -> Result<Vec64>;
}

impl GaussianSource for SeededRng {
    fn gaussian_vec(&mut self, dim: usize, std: f64) -> Result<Vec64> {
        gaussian_vec(self, dim, std)
    }
}

pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("l2_norm"));
    }
    let sum_sq = v.iter().map(|x| x * x).sum::<f64>();
    let underflow = sum_sq < f64::MIN_POSITIVE && v.iter().any(|x| *x != 0.0);
    if sum_sq.is_finite() && !underflow {
        return Ok(sum_sq.sqrt());
    }
    // squares overflowed or underflowed: rescale by the largest magnitude
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt())
}

/// Max-subtracted softmax.
pub fn softmax_row(v: &[f64]) -> Result<Vec64> {
    if v.is_empty() {
        return Err(Error::Empty("softmax_row"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax_row"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Vec64::from_finite(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape(u.len(), v.len()));
    }
    let nu = l2_norm(u)?;
    let nv = l2_norm(v)?;
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `dim` i.i.d. N(0, std²) draws. The stream advances by `dim` normals even
/// when `std == 0`, so the position of later draws never depends on `std`.
pub fn gaussian_vec(rng: &mut SeededRng, dim: usize, std: f64) -> Result<Vec64> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(invalid(format!(
            "gaussian std must be finite and >= 0, got {std}"
        )));
    }
    if dim == 0 {
        return Err(invalid("gaussian_vec dim must be >= 1"));
    }
    let values = (0..dim)
        .map(|_| {
            let z = rng.standard_normal();
            if std == 0.0 {
                0.0
            } else {
                z * std
            }
        })
        .collect();
    Ok(Vec64::from_finite(values))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
