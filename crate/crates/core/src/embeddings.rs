//! Embedding matrices, preprocessing, cosine affinities and batch sampling.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Rows with a Euclidean norm below this are rejected as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// `n × d` matrix of finite real features, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Empty(format!(
                "embedding matrix must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            // nalgebra storage is column-major
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!("non-finite entry at ({r}, {c})")));
        }
        Ok(Self(values))
    }

    /// Builds from row-major values.
    pub fn from_rows(n: usize, d: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {n}x{d}, got {}",
                n * d,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, d, values))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix(self.0.select_rows(idx))
    }

    /// `self · wᵀ` for a `d' × d` map `w`.
    pub fn project(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.ncols() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "projection expects d={}, embeddings have d={}",
                w.ncols(),
                self.d()
            )));
        }
        Ok(&self.0 * w.transpose())
    }
}

/// Matrix of pairwise cosine similarities `K[U, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(pub DMatrix<f64>);

impl AffinityMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Paired samples: row `i` of `a` corresponds to row `i` of `b`.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub a: EmbeddingMatrix,
    pub b: EmbeddingMatrix,
}

impl PairedDataset {
    pub fn new(a: EmbeddingMatrix, b: EmbeddingMatrix) -> Result<Self> {
        if a.n() != b.n() {
            return Err(Error::DimensionMismatch(format!(
                "paired sets need equal row counts, got {} and {}",
                a.n(),
                b.n()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unpaired pools on each side; no row correspondence.
#[derive(Debug, Clone)]
pub struct UnpairedPool {
    pub x: EmbeddingMatrix,
    pub y: EmbeddingMatrix,
}

fn row_norms(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..m.nrows())
        .map(|i| {
            let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < MIN_ROW_NORM {
                Err(Error::DegenerateRow { row: i, norm })
            } else {
                Ok(norm)
            }
        })
        .collect()
}

/// Divides each row by its Euclidean norm.
pub fn normalize_rows_mat(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norms = row_norms(m)?;
    let mut out = m.clone();
    for (i, norm) in norms.iter().enumerate() {
        out.row_mut(i).unscale_mut(*norm);
    }
    Ok(out)
}

pub fn l2_normalize_rows(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    Ok(EmbeddingMatrix(normalize_rows_mat(e.matrix())?))
}

/// Subtracts the column means; returns the centered matrix and the means.
pub fn center_rows(e: &EmbeddingMatrix) -> (EmbeddingMatrix, DVector<f64>) {
    let m = e.matrix();
    let mean = m.row_mean().transpose();
    (EmbeddingMatrix(subtract_mean(m, &mean)), mean)
}

pub(crate) fn subtract_mean(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Cosine affinity between the rows of two plain matrices.
pub fn cosine_affinity_mat(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cosine affinity needs equal feature dims, got {} and {}",
            u.ncols(),
            v.ncols()
        )));
    }
    let un = normalize_rows_mat(u)?;
    let vn = normalize_rows_mat(v)?;
    Ok(un * vn.transpose())
}

/// `K[U,V]_{ij} = ⟨U_i, V_j⟩ / (‖U_i‖ ‖V_j‖)`.
pub fn cosine_affinity(u: &EmbeddingMatrix, v: &EmbeddingMatrix) -> Result<AffinityMatrix> {
    cosine_affinity_mat(u.matrix(), v.matrix()).map(AffinityMatrix)
}

/// Row-wise `Softmax_ε(K)`, max-subtracted.
pub fn row_softmax(k: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let log_p = row_log_softmax(k, eps)?;
    Ok(log_p.map(f64::exp))
}

/// Row-wise log of `Softmax_ε(K)`.
pub fn row_log_softmax(k: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("softmax temperature must be > 0, got {eps}")));
    }
    let mut out = k / eps;
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    Ok(out)
}

/// Row preprocessing applied before any linear map: optional centering with
/// statistics from the fitting data, then optional unit-norm rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub center: bool,
    pub normalize: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self { center: true, normalize: true }
    }
}

impl Preprocess {
    pub const NONE: Preprocess = Preprocess { center: false, normalize: false };

    pub fn flags(&self) -> u32 {
        self.center as u32 | (self.normalize as u32) << 1
    }

    pub fn from_flags(flags: u32) -> Self {
        Self { center: flags & 1 != 0, normalize: flags & 2 != 0 }
    }

    /// Centering statistics for `e` (zeros when centering is off).
    pub fn fit(&self, e: &EmbeddingMatrix) -> DVector<f64> {
        if self.center {
            e.matrix().row_mean().transpose()
        } else {
            DVector::zeros(e.d())
        }
    }

    pub fn apply(&self, m: &DMatrix<f64>, mean: &DVector<f64>) -> Result<DMatrix<f64>> {
        if mean.len() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "preprocessing mean has {} entries, data has d={}",
                mean.len(),
                m.ncols()
            )));
        }
        let centered = if self.center { subtract_mean(m, mean) } else { m.clone() };
        if self.normalize {
            normalize_rows_mat(&centered)
        } else {
            Ok(centered)
        }
    }
}

/// Index sets drawn for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub paired_idx: Vec<usize>,
    pub unpaired_x_idx: Vec<usize>,
    pub unpaired_y_idx: Vec<usize>,
    pub seed: u64,
}

fn draw(rng: &mut rng::Rng, available: usize, count: usize, what: &str) -> Result<Vec<usize>> {
    if count > available {
        return Err(Error::Parameter(format!(
            "requested {count} {what} rows but only {available} available"
        )));
    }
    Ok(index::sample(rng, available, count).into_vec())
}

/// Uniform sampling without replacement within each list.
///
/// Each list uses its own stream of `seed` so the paired draw never depends
/// on the pool sizes.
pub fn sample_batch(
    paired: &PairedDataset,
    pool: &UnpairedPool,
    n_pair: usize,
    n_unpaired_x: usize,
    n_unpaired_y: usize,
    seed: u64,
) -> Result<Batch> {
    let mut prng = rng::stream(seed, Stream::PairedBatch);
    let mut urng = rng::stream(seed, Stream::UnpairedBatch);
    Ok(Batch {
        paired_idx: draw(&mut prng, paired.len(), n_pair, "paired")?,
        unpaired_x_idx: draw(&mut urng, pool.x.n(), n_unpaired_x, "unpaired x")?,
        unpaired_y_idx: draw(&mut urng, pool.y.n(), n_unpaired_y, "unpaired y")?,
        seed,
    })
}
