//! Divergences between a learned affinity `K` and a target `K*`, each with its
//! gradient in `K` (the target side is held constant), plus the supervised
//! SigLIP loss.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::{center_rows, row_log_softmax, EmbeddingMatrix};
use crate::entropic_ot::{klot_with_gradient, SinkhornConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Cka,
    Infonce,
    Klot,
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cka" => Ok(Self::Cka),
            "infonce" => Ok(Self::Infonce),
            "klot" => Ok(Self::Klot),
            other => Err(Error::Parameter(format!("unknown divergence '{other}'"))),
        }
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cka => "cka",
            Self::Infonce => "infonce",
            Self::Klot => "klot",
        })
    }
}

/// Which divergence to use and at which temperatures.
///
/// `eps` applies to the learned affinity, `eps_star` to the target. CKA
/// ignores both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub eps: f64,
    pub eps_star: f64,
    pub sinkhorn: SinkhornConfig,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::Klot,
            eps: 0.05,
            eps_star: 0.01,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind != DivergenceKind::Cka {
            for (name, v) in [("eps", self.eps), ("eps_star", self.eps_star)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

fn check_same_square(k: &DMatrix<f64>, k_star: &DMatrix<f64>) -> Result<usize> {
    if k.nrows() != k.ncols() || k.shape() != k_star.shape() || k.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "K and K* must be equal-size square matrices, got {:?} and {:?}",
            k.shape(),
            k_star.shape()
        )));
    }
    Ok(k.nrows())
}

/// Divergence value and its gradient in `K`.
///
/// KLOT is reported per row (the raw KL divided by `n`), InfoNCE is the mean
/// row-wise KL, CKA is `1 − CKA(K, K*)`.
pub fn divergence_value_and_grad(
    spec: &DivergenceSpec,
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    spec.validate()?;
    let n = check_same_square(k, k_star)? as f64;
    match spec.kind {
        DivergenceKind::Klot => {
            let r = klot_with_gradient(k, k_star, spec.eps, spec.eps_star, &spec.sinkhorn)?;
            Ok((r.value / n, r.gradient / n))
        }
        DivergenceKind::Infonce => generalized_infonce(k, k_star, spec.eps, spec.eps_star),
        DivergenceKind::Cka => {
            let (cka, grad) = cka_with_gradient(k, k_star)?;
            Ok((1.0 - cka, -grad))
        }
    }
}

/// Double-centered kernel `HKH`.
fn double_center(k: &DMatrix<f64>) -> DMatrix<f64> {
    let row_means = k.column_mean(); // mean over columns, one per row
    let col_means = k.row_mean(); // one per column
    let total = k.mean();
    DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] - row_means[i] - col_means[j] + total)
}

/// `⟨K₁H, HK₂⟩ / √(⟨K₁H, HK₁⟩⟨K₂H, HK₂⟩)` on explicit kernels.
pub fn cka_from_kernels(k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> Result<f64> {
    Ok(cka_with_gradient(k1, k2)?.0)
}

/// CKA and its gradient with respect to the first kernel.
pub fn cka_with_gradient(k1: &DMatrix<f64>, k2: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    check_same_square(k1, k2)?;
    let c1 = double_center(k1);
    let c2 = double_center(k2);
    let n1 = c1.norm();
    let n2 = c2.norm();
    if n1 <= 1e-12 * k1.norm() || n2 <= 1e-12 * k2.norm() || n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedCka("a centered kernel is identically zero".into()));
    }
    let inner = c1.dot(&c2);
    let cka = inner / (n1 * n2);
    // d⟨HK₁H, K̄₂⟩ = K̄₂ and d‖HK₁H‖ = K̄₁/‖K̄₁‖ because H is a symmetric projector.
    let grad = &c2 / (n1 * n2) - &c1 * (cka / (n1 * n1));
    Ok((cka, grad))
}

/// Linear CKA of two representations without forming any `n × n` matrix:
/// `‖X̄₁ᵀX̄₂‖²_F / (‖X̄₁ᵀX̄₁‖_F ‖X̄₂ᵀX̄₂‖_F)` on column-centered inputs.
pub fn cka_div(x1: &EmbeddingMatrix, x2: &EmbeddingMatrix) -> Result<f64> {
    if x1.n() != x2.n() {
        return Err(Error::DimensionMismatch(format!(
            "CKA needs equal sample counts, got {} and {}",
            x1.n(),
            x2.n()
        )));
    }
    let (c1, _) = center_rows(x1);
    let (c2, _) = center_rows(x2);
    let (c1, c2) = (c1.matrix(), c2.matrix());
    let cross = c1.tr_mul(c2);
    let g1 = c1.tr_mul(c1);
    let g2 = c2.tr_mul(c2);
    let denom = g1.norm() * g2.norm();
    let scale = x1.matrix().norm_squared() * x2.matrix().norm_squared();
    if denom <= 1e-24 * scale || denom == 0.0 {
        return Err(Error::UndefinedCka("an input is constant across samples".into()));
    }
    Ok(cross.norm_squared() / denom)
}

/// `mean_i KL(Softmax_ε*(K*)_i ‖ Softmax_ε(K)_i)` and its gradient
/// `(Softmax_ε(K) − Softmax_ε*(K*)) / (ε n)`.
pub fn generalized_infonce(
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    eps: f64,
    eps_star: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let n = check_same_square(k, k_star)?;
    let log_q = row_log_softmax(k, eps)?;
    let log_p = row_log_softmax(k_star, eps_star)?;
    let mut total = 0.0;
    for (lp, lq) in log_p.iter().zip(log_q.iter()) {
        let p = lp.exp();
        if p > 0.0 {
            total += p * (lp - lq);
        }
    }
    let grad = (log_q.map(f64::exp) - log_p.map(f64::exp)) / (eps * n as f64);
    Ok((total / n as f64, grad))
}

/// Classical InfoNCE with identity targets, `−(1/n) Σ_i log Softmax_τ(K)_ii`,
/// and its gradient.
pub fn infonce_loss(k: &DMatrix<f64>, temperature: f64) -> Result<(f64, DMatrix<f64>)> {
    let n = k.nrows();
    if k.ncols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!("InfoNCE needs a square K, got {:?}", k.shape())));
    }
    let log_q = row_log_softmax(k, temperature)?;
    let value = -(0..n).map(|i| log_q[(i, i)]).sum::<f64>() / n as f64;
    let mut grad = log_q.map(f64::exp);
    for i in 0..n {
        grad[(i, i)] -= 1.0;
    }
    Ok((value, grad / (temperature * n as f64)))
}

/// Learned logit scale `t` and bias `b` of the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiglipParams {
    pub scale: f64,
    pub bias: f64,
}

impl Default for SiglipParams {
    fn default() -> Self {
        Self { scale: 20.0, bias: -10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiglipOutput {
    pub value: f64,
    pub grad_k: DMatrix<f64>,
    pub grad_scale: f64,
    pub grad_bias: f64,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise sigmoid loss against identity targets,
/// `(1/n) Σ_ij log(1 + exp(−z_ij (t K_ij + b)))` with `z_ii = 1`, `z_ij = −1`.
pub fn siglip_loss(k_p: &DMatrix<f64>, params: &SiglipParams) -> Result<SiglipOutput> {
    let n = k_p.nrows();
    if k_p.ncols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "SigLIP needs a square paired affinity, got {:?}",
            k_p.shape()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_k = DMatrix::zeros(n, n);
    let mut grad_scale = 0.0;
    let mut grad_bias = 0.0;
    for j in 0..n {
        for i in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let logit = params.scale * k_p[(i, j)] + params.bias;
            value += softplus(-z * logit);
            // d softplus(−z l)/dl = −z σ(−z l)
            let dl = -z * sigmoid(-z * logit) * inv_n;
            grad_k[(i, j)] = dl * params.scale;
            grad_scale += dl * k_p[(i, j)];
            grad_bias += dl;
        }
    }
    Ok(SiglipOutput {
        value: value * inv_n,
        grad_k,
        grad_scale,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic_ot::fd_gradient;
    use crate::linalg::{gaussian_matrix, max_abs_diff, relative_error};
    use crate::rng::stream_at;

    fn random_k(seed: u64, n: usize) -> DMatrix<f64> {
        gaussian_matrix(&mut stream_at(seed, 200), n, n, 1.0).map(f64::tanh)
    }

    #[test]
    fn zero_at_matched_inputs() {
        let k = random_k(1, 6);
        for kind in [DivergenceKind::Klot, DivergenceKind::Infonce, DivergenceKind::Cka] {
            let spec = DivergenceSpec {
                kind,
                eps: 0.1,
                eps_star: 0.1,
                sinkhorn: SinkhornConfig::tight(),
            };
            let (v, g) = divergence_value_and_grad(&spec, &k, &k).unwrap();
            assert!(v.abs() < 1e-9, "{kind}: {v}");
            assert!(g.amax() < 1e-6, "{kind}: {}", g.amax());
        }
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let spec = DivergenceSpec::default();
        let r = divergence_value_and_grad(&spec, &random_k(1, 3), &random_k(1, 4));
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
        assert!("mmd".parse::<DivergenceKind>().is_err());
    }

    #[test]
    fn infonce_row_shift_invariance() {
        let k = random_k(2, 5);
        let k_star = random_k(3, 5);
        let (v, g) = generalized_infonce(&k, &k_star, 0.7, 0.2).unwrap();
        let mut shifted = k.clone();
        shifted.row_mut(2).add_scalar_mut(4.0);
        let mut shifted_star = k_star.clone();
        shifted_star.row_mut(0).add_scalar_mut(-1.5);
        let (v2, g2) = generalized_infonce(&shifted, &shifted_star, 0.7, 0.2).unwrap();
        assert!((v - v2).abs() < 1e-8);
        assert!(max_abs_diff(&g, &g2) < 1e-8);
    }

    #[test]
    fn infonce_gradient_matches_fd() {
        let k = random_k(4, 8);
        let k_star = random_k(5, 8);
        let (_, g) = generalized_infonce(&k, &k_star, 1.0, 0.1).unwrap();
        let fd = fd_gradient(|m| Ok(generalized_infonce(m, &k_star, 1.0, 0.1)?.0), &k, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) < 1e-4);
    }

    #[test]
    fn classical_infonce_gradient_matches_fd() {
        let k = random_k(6, 5);
        let (_, g) = infonce_loss(&k, 0.3).unwrap();
        let fd = fd_gradient(|m| Ok(infonce_loss(m, 0.3)?.0), &k, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) < 1e-4);
    }

    #[test]
    fn cka_examples() {
        let k1 = random_k(7, 6);
        let k2 = random_k(8, 6);
        assert!((cka_from_kernels(&k1, &k1).unwrap() - 1.0).abs() < 1e-12);
        let a = cka_from_kernels(&(&k1 * 7.3), &k2).unwrap();
        let b = cka_from_kernels(&k1, &k2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(b.abs() <= 1.0);
        let flat = DMatrix::from_element(6, 6, 1.0);
        assert!(matches!(cka_from_kernels(&flat, &k2), Err(Error::UndefinedCka(_))));
    }

    #[test]
    fn cka_gradient_matches_fd() {
        let k = random_k(9, 8);
        let k_star = random_k(10, 8);
        let spec = DivergenceSpec { kind: DivergenceKind::Cka, ..Default::default() };
        let (_, g) = divergence_value_and_grad(&spec, &k, &k_star).unwrap();
        let fd = fd_gradient(|m| Ok(divergence_value_and_grad(&spec, m, &k_star)?.0), &k, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-12) < 1e-4);
    }

    #[test]
    fn cka_div_rejects_constant_input() {
        let x = EmbeddingMatrix::from_rows(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let y = EmbeddingMatrix::from_rows(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(cka_div(&x, &y), Err(Error::UndefinedCka(_))));
    }

    #[test]
    fn siglip_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let out = siglip_loss(&one, &SiglipParams::default()).unwrap();
        assert!((out.value - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((out.value - 4.5399e-5).abs() < 1e-8);

        let zeros = DMatrix::zeros(2, 2);
        let out = siglip_loss(&zeros, &SiglipParams::default()).unwrap();
        let expected = 0.5 * (2.0 * (1.0 + 10f64.exp()).ln() + 2.0 * (1.0 + (-10f64).exp()).ln());
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 10.00005).abs() < 1e-4);

        let out = siglip_loss(&DMatrix::identity(3, 3), &SiglipParams::default()).unwrap();
        assert!(out.grad_scale < 0.0);
    }

    #[test]
    fn siglip_gradients_match_fd() {
        let k = random_k(11, 5);
        let p = SiglipParams { scale: 3.0, bias: -1.0 };
        let out = siglip_loss(&k, &p).unwrap();
        let fd = fd_gradient(|m| Ok(siglip_loss(m, &p)?.value), &k, 1e-5).unwrap();
        assert!(relative_error(&out.grad_k, &fd, 1e-12) < 1e-4);
        let h = 1e-5;
        let f = |s: f64, b: f64| siglip_loss(&k, &SiglipParams { scale: s, bias: b }).unwrap().value;
        let ds = (f(p.scale + h, p.bias) - f(p.scale - h, p.bias)) / (2.0 * h);
        let db = (f(p.scale, p.bias + h) - f(p.scale, p.bias - h)) / (2.0 * h);
        assert!((ds - out.grad_scale).abs() < 1e-4 * ds.abs().max(1e-8));
        assert!((db - out.grad_bias).abs() < 1e-4 * db.abs().max(1e-8));
    }

    #[test]
    fn siglip_is_positive() {
        for seed in 0..10 {
            let k = random_k(seed, 4);
            assert!(siglip_loss(&k, &SiglipParams { scale: 50.0, bias: 5.0 }).unwrap().value > 0.0);
        }
    }
}
