//! Feature sets and the pairwise cosine-similarity matrix over them.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ToyModel;
use crate::numkit::{self, cosine_with_norms, Matrix, DEGENERATE_NORM};

const DIST_MAGIC: &[u8; 8] = b"UGDIST01";

/// Which part of the dataset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Remaining,
    Removal,
    Test,
}

/// L2-normalized feature rows with labels, stable ids and split tags.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    features: Matrix,
    labels: Vec<usize>,
    ids: Vec<usize>,
    split: Vec<Split>,
    degenerate: Vec<bool>,
    index: HashMap<usize, usize>,
}

impl FeatureSet {
    /// Normalizes each row of `raw` and wraps it.
    pub fn from_raw(raw: &Matrix, labels: Vec<usize>, ids: Vec<usize>, split: Vec<Split>) -> Result<Self> {
        let mut features = Matrix::zeros(raw.rows(), raw.cols());
        let mut degenerate = Vec::with_capacity(raw.rows());
        for i in 0..raw.rows() {
            let n = numkit::l2_normalize(raw.row(i));
            features.row_mut(i).copy_from_slice(&n.values);
            degenerate.push(n.degenerate);
        }
        Self::assemble(features, labels, ids, split, degenerate)
    }

    /// Wraps rows that are already unit-norm; any row off by more than `tol`
    /// (and not a zero row) is rejected.
    pub fn from_normalized(
        features: Matrix,
        labels: Vec<usize>,
        ids: Vec<usize>,
        split: Vec<Split>,
        tol: f64,
    ) -> Result<Self> {
        let mut degenerate = Vec::with_capacity(features.rows());
        for (i, r) in features.iter_rows().enumerate() {
            let n = numkit::norm(r);
            if n < DEGENERATE_NORM {
                degenerate.push(true);
            } else if (n - 1.0).abs() > tol {
                return Err(Error::Format(format!("row {i} has norm {n}, expected unit norm")));
            } else {
                degenerate.push(false);
            }
        }
        Self::assemble(features, labels, ids, split, degenerate)
    }

    /// Extracts normalized penultimate features of `model` for every input row.
    pub fn from_model(
        model: &ToyModel,
        inputs: &Matrix,
        labels: Vec<usize>,
        ids: Vec<usize>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let rows: Vec<_> = (0..inputs.rows())
            .into_par_iter()
            .map(|i| model.features(inputs.row(i)))
            .collect::<Result<_>>()?;
        let dim = model.arch().hidden_dim;
        let mut features = Matrix::zeros(rows.len(), dim);
        let mut degenerate = Vec::with_capacity(rows.len());
        for (i, n) in rows.into_iter().enumerate() {
            features.row_mut(i).copy_from_slice(&n.values);
            degenerate.push(n.degenerate);
        }
        Self::assemble(features, labels, ids, split, degenerate)
    }

    fn assemble(
        features: Matrix,
        labels: Vec<usize>,
        ids: Vec<usize>,
        split: Vec<Split>,
        degenerate: Vec<bool>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Empty("feature set"));
        }
        for len in [labels.len(), ids.len(), split.len()] {
            if len != n {
                return Err(Error::Dimension { expected: n, actual: len });
            }
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {}", pos / features.cols().max(1))));
        }
        let mut index = HashMap::with_capacity(n);
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { features, labels, ids, split, degenerate, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn set_split(&mut self, id: usize, split: Split) -> Result<()> {
        let row = self.row_of(id)?;
        self.split[row] = split;
        Ok(())
    }

    pub fn row_of(&self, id: usize) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn feature(&self, id: usize) -> Result<&[f64]> {
        Ok(self.features.row(self.row_of(id)?))
    }

    pub fn label(&self, id: usize) -> Result<usize> {
        Ok(self.labels[self.row_of(id)?])
    }
}

/// Symmetric N x N cosine-similarity matrix keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    ids: Vec<usize>,
    index: HashMap<usize, usize>,
}

/// Builds the full matrix, parallel over rows.
pub fn build_distance_matrix(fs: &FeatureSet) -> DistanceMatrix {
    build(fs, true)
}

/// Same result as [`build_distance_matrix`], computed on the calling thread.
pub fn build_distance_matrix_serial(fs: &FeatureSet) -> DistanceMatrix {
    build(fs, false)
}

fn build(fs: &FeatureSet, parallel: bool) -> DistanceMatrix {
    let n = fs.len();
    let feats = fs.features();
    let norms: Vec<f64> = feats.iter_rows().map(numkit::norm).collect();
    let mut values = vec![0.0; n * n];

    // Each row fills its upper triangle; the lower triangle is mirrored after.
    let fill_row = |(i, row): (usize, &mut [f64])| {
        let u = feats.row(i);
        row[i] = if norms[i] < DEGENERATE_NORM { -1.0 } else { 1.0 };
        for j in i + 1..n {
            row[j] = cosine_with_norms(u, feats.row(j), norms[i], norms[j]);
        }
    };
    if parallel {
        values.par_chunks_mut(n.max(1)).enumerate().for_each(fill_row);
    } else {
        values.chunks_mut(n.max(1)).enumerate().for_each(fill_row);
    }
    for i in 1..n {
        for j in 0..i {
            values[i * n + j] = values[j * n + i];
        }
    }
    DistanceMatrix { n, values, ids: fs.ids().to_vec(), index: fs.index.clone() }
}

impl DistanceMatrix {
    /// Wraps explicit values; the matrix must be square and symmetric.
    pub fn from_values(ids: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::Dimension { expected: n * n, actual: values.len() });
        }
        for i in 0..n {
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Format(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        if let Some(pos) = values.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("entry {pos} outside [-1, 1]")));
        }
        let mut index = HashMap::with_capacity(n);
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { n, values, ids, index })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn position(&self, id: usize) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    /// Entry by row/column position.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row_at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Entry by sample ids.
    pub fn get(&self, a: usize, b: usize) -> Result<f64> {
        Ok(self.at(self.position(a)?, self.position(b)?))
    }

    /// `|rows| x |cols|` view. The id sets must be known and disjoint.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Result<SubmatrixView<'_>> {
        let row_pos = rows.iter().map(|&id| self.position(id)).collect::<Result<Vec<_>>>()?;
        let col_pos = cols.iter().map(|&id| self.position(id)).collect::<Result<Vec<_>>>()?;
        let row_set: HashSet<usize> = rows.iter().copied().collect();
        if let Some(&dup) = cols.iter().find(|id| row_set.contains(id)) {
            return Err(Error::OverlappingSplits(dup));
        }
        Ok(SubmatrixView {
            matrix: self,
            row_ids: rows.to_vec(),
            col_ids: cols.to_vec(),
            row_pos,
            col_pos,
        })
    }

    /// Number of `candidates` whose similarity to `row` is at least `theta`.
    pub fn neighbor_count(&self, row: usize, theta: f64, candidates: &[usize]) -> Result<usize> {
        let r = self.row_at(self.position(row)?);
        let mut count = 0;
        for &c in candidates {
            if r[self.position(c)?] >= theta {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Dump encoding: magic, u64 LE N, row-major f64 LE values.
    pub fn to_dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(DIST_MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Reads a dump; ids become row positions `0..N`.
    pub fn from_dump(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != DIST_MAGIC {
            return Err(Error::Format("missing UGDIST01 header".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        let expected = n.checked_mul(n).and_then(|x| x.checked_mul(8));
        if expected != Some(body.len()) {
            return Err(Error::Format(format!("dump body is {} bytes for N = {n}", body.len())));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_values((0..n).collect(), values)
    }
}

/// Rows x columns selection of a [`DistanceMatrix`].
#[derive(Debug, Clone)]
pub struct SubmatrixView<'a> {
    matrix: &'a DistanceMatrix,
    row_ids: Vec<usize>,
    col_ids: Vec<usize>,
    row_pos: Vec<usize>,
    col_pos: Vec<usize>,
}

impl SubmatrixView<'_> {
    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[usize] {
        &self.col_ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(self.row_pos[i], self.col_pos[j])
    }

    /// Count of columns in `col_mask` (view column indices) with value >= theta
    /// in view row `i`.
    pub fn neighbor_count(&self, i: usize, theta: f64, col_mask: &[usize]) -> usize {
        let r = self.matrix.row_at(self.row_pos[i]);
        col_mask.iter().filter(|&&j| r[self.col_pos[j]] >= theta).count()
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_rows(), self.n_cols());
        for i in 0..self.n_rows() {
            for j in 0..self.n_cols() {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }
}
