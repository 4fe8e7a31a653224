//! Numerical substrate shared by every other module.
//!
//! Everything here is `f64`, pure, and re-entrant. The only stateful type is
//! [`SeededRng`], which is single-owner: parallel work derives children by
//! sub-seed instead of sharing a generator.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension { expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Euclidean distance between two equal-length slices.
#[inline]
pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Vectors with norm below [`DEGENERATE_NORM`] are maximally dissimilar to
/// everything, so they get `-1`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension { expected: u.len(), actual: v.len() });
    }
    if u.is_empty() {
        return Err(Error::Empty("cosine of zero-length vectors"));
    }
    let (nu2, nv2) = (dot(u, u), dot(v, v));
    if nu2.sqrt() < DEGENERATE_NORM || nv2.sqrt() < DEGENERATE_NORM {
        return Ok(-1.0);
    }
    // One square root of the product rounds less than two separate norms.
    Ok((dot(u, v) / (nu2 * nv2).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine with precomputed norms. Callers must pass equal-length slices.
#[inline]
pub fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return -1.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| (z - lse).min(0.0)).collect()
}

/// `ln(max(p, PROB_FLOOR))` elementwise.
pub fn clamped_log(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect()
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Scales `v` to unit length. Zero (or near-zero) vectors come back
/// unchanged with `degenerate` set; unit vectors come back bit-identical.
pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = norm(v);
    if n < DEGENERATE_NORM {
        return Normalized { values: v.to_vec(), degenerate: true };
    }
    if n == 1.0 {
        return Normalized { values: v.to_vec(), degenerate: false };
    }
    Normalized { values: v.iter().map(|x| x / n).collect(), degenerate: false }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by N).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Centers `rows` and projects them onto the top `dims` principal axes.
///
/// Each axis is sign-fixed so its largest-magnitude loading is positive.
/// Axes whose variance is numerically zero produce all-zero columns.
pub fn pca_project(rows: &Matrix, dims: usize) -> Result<Matrix> {
    let (n, d) = (rows.rows(), rows.cols());
    if n < 2 {
        return Err(Error::Empty("pca needs at least two rows"));
    }
    if dims > d {
        return Err(Error::Dimension { expected: d, actual: dims });
    }

    let mut centroid = vec![0.0; d];
    for r in rows.iter_rows() {
        for (c, x) in centroid.iter_mut().zip(r) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows.get(i, j) - centroid[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]).max(0.0);

    let mut out = Matrix::zeros(n, dims);
    for (k, &axis) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[axis];
        if top <= f64::MIN_POSITIVE || lambda <= 1e-10 * top {
            continue;
        }
        let mut loading: Vec<f64> = eig.eigenvectors.column(axis).iter().copied().collect();
        let lead = loading
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1.abs() { (i, v) } else { acc });
        if loading[lead.0] < 0.0 {
            for v in &mut loading {
                *v = -*v;
            }
        }
        for i in 0..n {
            let proj: f64 = (0..d).map(|j| centered[(i, j)] * loading[j]).sum();
            out.set(i, k, proj);
        }
    }
    Ok(out)
}

/// Mixes a base seed with a sequence of tags (splitmix64 finalizer per step).
///
/// This is the documented sub-seed scheme: a component that needs its own
/// stream calls `derive_seed(base, &[component_tag, index, ...])`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x5547_5345_4544_0001);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream. Identical seeds give identical streams on every
/// platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator keyed by this generator's seed and `tag`; does
    /// not consume from this stream.
    pub fn child(&self, tag: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, &[tag]))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
