//! Distances between embedding distributions (sliced and spherical sliced
//! Wasserstein) and the mutual nearest-neighbour similarity score.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine_affinity_mat, l2_normalize_rows, EmbeddingMatrix, PairedDataset, UnpairedPool};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub const DEFAULT_P: f64 = 2.0;
pub const DEFAULT_PROJECTIONS: usize = 500;
pub const DEFAULT_RESAMPLES: usize = 20;
pub const DEFAULT_KNN: usize = 10;
const UNIT_TOL: f64 = 1e-5;

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Parameter(format!("order p must be >= 1, got {p}")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `W_p^p` between two empirical measures on the line with uniform weights.
fn wasserstein_1d_pow(a: &[f64], b: &[f64], p: f64) -> f64 {
    let a = sorted(a);
    let b = sorted(b);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64;
    }
    // Quantile matching: walk the merged breakpoints of both CDFs.
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut t, mut cost) = (0, 0, 0.0, 0.0);
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / n;
        let next_b = (j + 1) as f64 / m;
        let next = next_a.min(next_b);
        cost += (next - t) * (a[i] - b[j]).abs().powf(p);
        t = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    cost
}

/// p-Wasserstein distance between two samples on the real line.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein_1d needs non-empty samples".into()));
    }
    check_p(p)?;
    Ok(wasserstein_1d_pow(a, b, p).powf(1.0 / p))
}

fn random_direction(rng: &mut Rng, d: usize) -> DVector<f64> {
    loop {
        let g: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng));
        let norm = g.norm();
        if norm > 1e-12 {
            return g / norm;
        }
    }
}

fn check_same_dim(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.d() != y.d() {
        return Err(Error::DimensionMismatch(format!("d={} vs d={}", x.d(), y.d())));
    }
    Ok(())
}

fn check_n_proj(n_proj: usize) -> Result<()> {
    if n_proj == 0 {
        return Err(Error::Parameter("n_proj must be >= 1".into()));
    }
    Ok(())
}

/// Per-slice `W_p^p` of the linear projections onto `n_proj` random directions.
pub fn sliced_costs(x: &EmbeddingMatrix, y: &EmbeddingMatrix, n_proj: usize, p: f64, seed: u64) -> Result<Vec<f64>> {
    check_same_dim(x, y)?;
    check_n_proj(n_proj)?;
    check_p(p)?;
    let mut rng = rng::stream(seed, Stream::Projections);
    Ok((0..n_proj)
        .map(|_| {
            let theta = random_direction(&mut rng, x.d());
            let px = x.matrix() * &theta;
            let py = y.matrix() * &theta;
            wasserstein_1d_pow(px.as_slice(), py.as_slice(), p)
        })
        .collect())
}

/// `((1/N) Σ_θ W_p^p(X θ, Y θ))^{1/p}` over `N` random directions.
pub fn sliced_wasserstein(x: &EmbeddingMatrix, y: &EmbeddingMatrix, n_proj: usize, p: f64, seed: u64) -> Result<f64> {
    let costs = sliced_costs(x, y, n_proj, p, seed)?;
    Ok((costs.iter().sum::<f64>() / n_proj as f64).powf(1.0 / p))
}

fn geodesic(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % TAU;
    d.min(TAU - d)
}

/// `W_p^p` on the circle for equal-size sorted angle lists.
fn circular_pow_sorted(a: &[f64], b: &[f64], p: f64) -> f64 {
    let n = a.len();
    (0..n)
        .map(|shift| (0..n).map(|i| geodesic(a[i], b[(i + shift) % n]).powf(p)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

/// p-Wasserstein distance between equal-size samples of angles on the circle,
/// minimized exactly over the cyclic matchings of the sorted samples.
pub fn circular_wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} angles vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("circular_wasserstein_1d needs non-empty samples".into()));
    }
    check_p(p)?;
    if let Some(bad) = a.iter().chain(b).find(|t| !(0.0..TAU).contains(*t)) {
        return Err(Error::Parameter(format!("angle {bad} outside [0, 2π)")));
    }
    Ok(circular_pow_sorted(&sorted(a), &sorted(b), p).powf(1.0 / p))
}

fn check_unit_rows(e: &EmbeddingMatrix) -> Result<()> {
    for (row, r) in e.matrix().row_iter().enumerate() {
        let norm = r.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

fn circle_angles(m: &DMatrix<f64>, e1: &DVector<f64>, e2: &DVector<f64>) -> Vec<f64> {
    let c = m * e1;
    let s = m * e2;
    let mut out: Vec<f64> = c.iter().zip(s.iter()).map(|(&c, &s)| s.atan2(c).rem_euclid(TAU)).collect();
    for t in &mut out {
        if *t >= TAU {
            *t = 0.0;
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Orthonormal basis of a uniformly random 2-plane in `R^d`.
fn random_plane(rng: &mut Rng, d: usize) -> (DVector<f64>, DVector<f64>) {
    let e1 = random_direction(rng, d);
    loop {
        let g = random_direction(rng, d);
        let r = &g - &e1 * e1.dot(&g);
        let norm = r.norm();
        if norm > 1e-8 {
            return (e1, r / norm);
        }
    }
}

/// Per-slice circular `W_p^p` for equal-size unit-norm inputs.
fn spherical_costs_equal(x: &DMatrix<f64>, y: &DMatrix<f64>, planes: &[(DVector<f64>, DVector<f64>)], p: f64) -> Vec<f64> {
    planes
        .iter()
        .map(|(e1, e2)| circular_pow_sorted(&circle_angles(x, e1, e2), &circle_angles(y, e1, e2), p))
        .collect()
}

/// Per-slice circular `W_p^p` on random great circles for equal-size
/// unit-norm samples.
pub fn spherical_costs(x: &EmbeddingMatrix, y: &EmbeddingMatrix, n_proj: usize, p: f64, seed: u64) -> Result<Vec<f64>> {
    check_same_dim(x, y)?;
    check_n_proj(n_proj)?;
    check_p(p)?;
    check_unit_rows(x)?;
    check_unit_rows(y)?;
    if x.n() != y.n() {
        return Err(Error::DimensionMismatch(format!("{} rows vs {}", x.n(), y.n())));
    }
    let mut prng = rng::stream(seed, Stream::Projections);
    let planes: Vec<_> = (0..n_proj).map(|_| random_plane(&mut prng, x.d())).collect();
    Ok(spherical_costs_equal(x.matrix(), y.matrix(), &planes, p))
}

/// Spherical sliced Wasserstein distance between unit-norm samples.
///
/// Each slice projects onto a random great circle and solves 1-D optimal
/// transport on that circle; the result is `((1/N) Σ W_p^p)^{1/p}`. When the
/// sample sizes differ the larger one is subsampled to the smaller size
/// [`DEFAULT_RESAMPLES`] times and the distances are averaged.
pub fn spherical_sliced_wasserstein(x: &EmbeddingMatrix, y: &EmbeddingMatrix, n_proj: usize, p: f64, seed: u64) -> Result<f64> {
    check_same_dim(x, y)?;
    check_n_proj(n_proj)?;
    check_p(p)?;
    check_unit_rows(x)?;
    check_unit_rows(y)?;
    if x.d() < 2 {
        return Err(Error::Parameter("spherical slicing needs d >= 2".into()));
    }
    let mut prng = rng::stream(seed, Stream::Projections);
    let planes: Vec<_> = (0..n_proj).map(|_| random_plane(&mut prng, x.d())).collect();
    let ssw = |xm: &DMatrix<f64>, ym: &DMatrix<f64>| {
        let costs = spherical_costs_equal(xm, ym, &planes, p);
        (costs.iter().sum::<f64>() / n_proj as f64).powf(1.0 / p)
    };
    if x.n() == y.n() {
        return Ok(ssw(x.matrix(), y.matrix()));
    }
    let (big, small, x_is_big) = if x.n() > y.n() { (x, y, true) } else { (y, x, false) };
    let mut srng = rng::stream(seed, Stream::Subsample);
    let mut total = 0.0;
    for _ in 0..DEFAULT_RESAMPLES {
        let idx = index::sample(&mut srng, big.n(), small.n()).into_vec();
        let sub = big.matrix().select_rows(&idx);
        total += if x_is_big { ssw(&sub, small.matrix()) } else { ssw(small.matrix(), &sub) };
    }
    Ok(total / DEFAULT_RESAMPLES as f64)
}

/// Distribution shift between an unpaired pool and the paired set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub ssw_x: f64,
    pub ssw_y: f64,
    pub total: f64,
    pub n_projections: usize,
    pub p: f64,
    pub seed: u64,
}

impl ShiftReport {
    pub const CSV_HEADER: &'static str = "dataset_x,dataset_y,ssw_x,ssw_y,total,n_proj,p,seed";

    pub fn csv_row(&self, dataset_x: &str, dataset_y: &str) -> String {
        format!(
            "{dataset_x},{dataset_y},{},{},{},{},{},{}",
            self.ssw_x, self.ssw_y, self.total, self.n_projections, self.p, self.seed
        )
    }
}

/// `SSW(X, A) + SSW(Y, B)` on row-normalized embeddings.
pub fn total_ssw(pool: &UnpairedPool, paired: &PairedDataset, n_proj: usize, p: f64, seed: u64) -> Result<ShiftReport> {
    let ssw_x = spherical_sliced_wasserstein(&l2_normalize_rows(&pool.x)?, &l2_normalize_rows(&paired.a)?, n_proj, p, seed)?;
    let ssw_y = spherical_sliced_wasserstein(&l2_normalize_rows(&pool.y)?, &l2_normalize_rows(&paired.b)?, n_proj, p, seed)?;
    Ok(ShiftReport { ssw_x, ssw_y, total: ssw_x + ssw_y, n_projections: n_proj, p, seed })
}

/// Indices of the `k` most cosine-similar rows to each row, self excluded,
/// ties to the lower index.
fn knn_sets(e: &EmbeddingMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let sim = cosine_affinity_mat(e.matrix(), e.matrix())?;
    Ok((0..e.n())
        .map(|i| {
            let mut order: Vec<usize> = (0..e.n()).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| sim[(i, b)].total_cmp(&sim[(i, a)]).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            order
        })
        .collect())
}

/// Mean fraction of shared `k` nearest neighbours between corresponding rows
/// of two spaces.
pub fn mutual_knn(x: &EmbeddingMatrix, y: &EmbeddingMatrix, k: usize) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::DimensionMismatch(format!("{} rows vs {}", x.n(), y.n())));
    }
    if k == 0 || k >= x.n() {
        return Err(Error::Parameter(format!("k must be in 1..{}, got {k}", x.n())));
    }
    let nx = knn_sets(x, k)?;
    let ny = knn_sets(y, k)?;
    let total: usize = nx
        .iter()
        .zip(&ny)
        .map(|(a, b)| a.iter().filter(|i| b.binary_search(i).is_ok()).count())
        .sum();
    Ok(total as f64 / (k * x.n()) as f64)
}

/// Mean and standard error of the slice costs; handy for Monte-Carlo checks.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::linalg::{gaussian_matrix, random_orthogonal};
    use crate::rng::stream_at;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn emb(m: DMatrix<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(m).unwrap()
    }

    fn unit(m: DMatrix<f64>) -> EmbeddingMatrix {
        l2_normalize_rows(&emb(m)).unwrap()
    }

    #[test]
    fn w1d_examples() {
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0], 2.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0], 2.0).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5, 1.5], 1.0).unwrap(), 0.5);
        assert!(matches!(wasserstein_1d(&[], &[1.0], 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn w1d_unequal_sizes_use_quantiles() {
        // Duplicating every sample leaves the measure unchanged.
        let a = [0.3, -1.0, 2.5];
        let b = [1.0, 0.0, 4.0];
        let b2 = [1.0, 1.0, 0.0, 0.0, 4.0, 4.0];
        let w = wasserstein_1d(&a, &b, 2.0).unwrap();
        assert!((wasserstein_1d(&a, &b2, 2.0).unwrap() - w).abs() < 1e-12);
        // Point mass against two points: W_1 is the mean distance.
        assert!((wasserstein_1d(&[0.0], &[1.0, 3.0], 1.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sliced_basics() {
        let mut rng = stream_at(1, 0);
        let x = emb(gaussian_matrix(&mut rng, 20, 3, 1.0));
        let y = emb(gaussian_matrix(&mut rng, 25, 3, 1.0));
        assert!(sliced_wasserstein(&x, &x, 50, 2.0, 3).unwrap().abs() < 1e-12);
        let xy = sliced_wasserstein(&x, &y, 50, 2.0, 3).unwrap();
        let yx = sliced_wasserstein(&y, &x, 50, 2.0, 3).unwrap();
        assert!((xy - yx).abs() < 1e-12);
        let z = emb(gaussian_matrix(&mut rng, 5, 4, 1.0));
        assert!(matches!(sliced_wasserstein(&x, &z, 5, 2.0, 0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn sliced_collinear_matches_scaled_line_distance() {
        // Points on a line through direction u: each slice sees the line
        // coordinates scaled by |⟨u, θ⟩|, and E|cos φ|² = 1/2 in the plane.
        let mut rng = stream_at(2, 0);
        let u = [0.6, 0.8];
        let ta: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 3.0).collect();
        let tb: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 2.0 + 1.5).collect();
        let line = |t: &[f64]| emb(DMatrix::from_fn(t.len(), 2, |i, j| t[i] * u[j]));
        let sw = sliced_wasserstein(&line(&ta), &line(&tb), 500, 2.0, 7).unwrap();
        let exact = wasserstein_1d(&ta, &tb, 2.0).unwrap() * 0.5f64.sqrt();
        assert!((sw - exact).abs() / exact < 0.05, "{sw} vs {exact}");
    }

    fn brute_force_circular(a: &[f64], b: &[f64], p: f64) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = vec![];
            for rest in perms(n - 1) {
                for pos in 0..=rest.len() {
                    let mut v = rest.clone();
                    v.insert(pos, n - 1);
                    out.push(v);
                }
            }
            out
        }
        perms(a.len())
            .iter()
            .map(|s| s.iter().enumerate().map(|(i, &j)| geodesic(a[i], b[j]).powf(p)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn circular_examples() {
        let a = [0.1, 2.0, 5.0];
        assert_eq!(circular_wasserstein_1d(&a, &[5.0, 0.1, 2.0], 2.0).unwrap(), 0.0);
        assert!((circular_wasserstein_1d(&[0.0], &[PI / 2.0], 2.0).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(circular_wasserstein_1d(&[0.0], &[1.0, 2.0], 2.0).is_err());
        assert!(circular_wasserstein_1d(&[7.0], &[1.0], 2.0).is_err());
        // Wrap-around: 0.1 and 6.2 are close on the circle.
        let w = circular_wasserstein_1d(&[0.1], &[6.2], 1.0).unwrap();
        assert!((w - (TAU - 6.1)).abs() < 1e-12);
    }

    #[test]
    fn circular_matches_exhaustive_search() {
        let mut rng = stream_at(3, 0);
        for p in [1.0, 2.0, 3.0] {
            for _ in 0..20 {
                let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * TAU).collect();
                let b: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * TAU).collect();
                let brute = (brute_force_circular(&a, &b, p) / 5.0).powf(1.0 / p);
                let fast = circular_wasserstein_1d(&a, &b, p).unwrap();
                assert!((brute - fast).abs() < 1e-10, "{brute} vs {fast}");
            }
        }
    }

    #[test]
    fn spherical_examples() {
        let mut rng = stream_at(4, 0);
        let x = unit(gaussian_matrix(&mut rng, 15, 4, 1.0));
        assert!(spherical_sliced_wasserstein(&x, &x, 30, 2.0, 1).unwrap().abs() < 1e-12);
        let v = unit(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -0.5]));
        let neg = emb(-v.matrix().clone());
        let w = spherical_sliced_wasserstein(&v, &neg, 40, 2.0, 2).unwrap();
        assert!((w - PI).abs() < 1e-9, "{w}");
        let raw = emb(gaussian_matrix(&mut rng, 3, 4, 2.0));
        assert!(matches!(spherical_sliced_wasserstein(&raw, &x, 5, 2.0, 0), Err(Error::NotNormalized { .. })));
    }

    fn cluster(rng: &mut crate::rng::Rng, n: usize, center: [f64; 3]) -> EmbeddingMatrix {
        let c = DMatrix::from_fn(n, 3, |_, j| center[j]);
        unit(c + gaussian_matrix(rng, n, 3, 0.1))
    }

    #[test]
    fn spherical_monotone_in_separation() {
        for seed in 0..5 {
            let mut rng = stream_at(seed, 9);
            let base = cluster(&mut rng, 30, [1.0, 0.0, 0.0]);
            let mut prev = 0.0;
            for deg in [15.0f64, 45.0, 90.0] {
                let r = deg.to_radians();
                let other = cluster(&mut rng, 30, [r.cos(), r.sin(), 0.0]);
                let w = spherical_sliced_wasserstein(&base, &other, 200, 2.0, seed).unwrap();
                assert!(w > prev, "seed {seed}: {deg}° gave {w} <= {prev}");
                prev = w;
            }
        }
    }

    #[test]
    fn total_ssw_bookkeeping() {
        let mut rng = stream_at(5, 0);
        let a = emb(gaussian_matrix(&mut rng, 12, 4, 1.0));
        let b = emb(gaussian_matrix(&mut rng, 12, 3, 1.0));
        let paired = PairedDataset::new(a.clone(), b.clone()).unwrap();
        let same = UnpairedPool { x: a.clone(), y: b.clone() };
        let r = total_ssw(&same, &paired, 50, 2.0, 1).unwrap();
        assert!(r.total.abs() < 1e-12);

        let shifted_x = emb(gaussian_matrix(&mut rng, 30, 4, 1.0).add_scalar(1.0));
        let r1 = total_ssw(&UnpairedPool { x: shifted_x, y: b.clone() }, &paired, 50, 2.0, 1).unwrap();
        assert_eq!(r1.total, r1.ssw_x + r1.ssw_y);
        assert_eq!(r1.ssw_y, r.ssw_y);
        assert!(r1.ssw_x > 0.0);
        assert_eq!(r1.csv_row("x", "y").split(',').count(), ShiftReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn rotation_invariance_in_distribution() {
        let mut rng = stream_at(6, 0);
        let x = unit(gaussian_matrix(&mut rng, 25, 5, 1.0));
        let y = unit(gaussian_matrix(&mut rng, 25, 5, 1.0).add_scalar(0.5));
        let r = random_orthogonal(&mut rng, 5);
        let xr = emb(x.matrix() * &r);
        let yr = emb(y.matrix() * &r);
        let a = sliced_costs(&x, &y, 500, 2.0, 1).unwrap();
        let b = sliced_costs(&xr, &yr, 500, 2.0, 2).unwrap();
        let (ma, sa) = mean_and_se(&a);
        let (mb, sb) = mean_and_se(&b);
        assert!((ma - mb).abs() < 3.0 * (sa * sa + sb * sb).sqrt());

        let s = spherical_costs(&x, &y, 500, 2.0, 1).unwrap();
        let t = spherical_costs(&xr, &yr, 500, 2.0, 2).unwrap();
        let (ms, ss) = mean_and_se(&s);
        let (mt, st) = mean_and_se(&t);
        assert!((ms - mt).abs() < 3.0 * (ss * ss + st * st).sqrt());
    }

    #[test]
    fn mutual_knn_examples() {
        let mut rng = stream_at(7, 0);
        let x = emb(gaussian_matrix(&mut rng, 30, 5, 1.0));
        assert_eq!(mutual_knn(&x, &x, 10).unwrap(), 1.0);
        let r = random_orthogonal(&mut rng, 5);
        assert_eq!(mutual_knn(&x, &emb(x.matrix() * r), 10).unwrap(), 1.0);
        assert!(mutual_knn(&x, &x, 30).is_err());
    }

    #[test]
    fn mutual_knn_null_model() {
        let (n, k) = (200, 10);
        let scores: Vec<f64> = (0..20)
            .map(|t| {
                let mut rng = stream_at(8, t);
                let x = emb(gaussian_matrix(&mut rng, n, 8, 1.0));
                let y = emb(gaussian_matrix(&mut rng, n, 8, 1.0));
                mutual_knn(&x, &y, k).unwrap()
            })
            .collect();
        let (mean, se) = mean_and_se(&scores);
        let expected = k as f64 / (n - 1) as f64;
        assert!((mean - expected).abs() < 3.0 * se.max(1e-4), "{mean} vs {expected} (se {se})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn circle_never_exceeds_line(seed in 0u64..10_000, n in 1usize..8, p in 1.0f64..3.0) {
            let mut rng = stream_at(seed, 1);
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
            let c = circular_wasserstein_1d(&a, &b, p).unwrap();
            let l = wasserstein_1d(&a, &b, p).unwrap();
            prop_assert!(c <= l + 1e-12);
            prop_assert!(c >= 0.0);
            prop_assert!((c - circular_wasserstein_1d(&b, &a, p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mutual_knn_in_unit_interval(seed in 0u64..10_000, k in 1usize..6) {
            let mut rng = stream_at(seed, 2);
            let x = emb(gaussian_matrix(&mut rng, 8, 3, 1.0));
            let y = emb(gaussian_matrix(&mut rng, 8, 4, 1.0));
            let s = mutual_knn(&x, &y, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
