//! Entropic optimal transport between the two sides of a square affinity
//! matrix, the KLOT divergence and its gradient.
//!
//! Plans live in `Π_n = {P ≥ 0 : P1 = 1, Pᵀ1 = 1}` (total mass `n`) and solve
//! `OT_ε(K) = argmin_P −⟨P, K⟩ + ε Σ P log P`. The solver works on dual
//! potentials in the log domain, so `log P = u1ᵀ + K/ε + 1vᵀ` holds by
//! construction and no entry is ever formed by dividing tiny numbers.
//!
//! Because `log OT_ε(K)` is affine in `K` up to the potentials and the
//! objective is strongly convex, the gradient of `KL(T ‖ OT_ε(K))` with
//! respect to `K` is `(OT_ε(K) − T)/ε` for any fixed bistochastic `T`. That
//! needs only the converged plans. [`klot_gradient_unrolled`] differentiates
//! through the iterations instead and is kept as the reference path for the
//! memory comparison in [`grad_cost_profile`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embeddings::cosine_affinity_mat;
use crate::error::{Error, Result};
use crate::linalg::gaussian_matrix;
use crate::rng::{self, Stream};

/// Stopping rule for [`sinkhorn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Max L∞ violation of the row marginals (columns are exact after each sweep).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 100 }
    }
}

impl SinkhornConfig {
    pub fn tight() -> Self {
        Self { tol: 1e-13, max_iter: 100_000 }
    }

    /// Exactly `iterations` sweeps, no early stop.
    pub fn fixed(iterations: usize) -> Self {
        Self { tol: f64::NEG_INFINITY, max_iter: iterations }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: DMatrix<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// `log P_ij = u_i + K_ij/ε + v_j`.
    pub fn log_values(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.u[i] + k[(i, j)] / self.epsilon + self.v[j])
    }

    /// Floats held by the plan: dense values plus both potentials.
    pub fn retained_floats(&self) -> usize {
        self.values.len() + self.u.len() + self.v.len()
    }
}

/// `W_ε(T, K) = −⟨T, K⟩ + ε H(T)` split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtValue {
    pub value: f64,
    pub transport_cost: f64,
    pub entropy: f64,
}

fn check_square(k: &DMatrix<f64>, what: &str) -> Result<usize> {
    if k.nrows() != k.ncols() || k.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square and non-empty, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    Ok(k.nrows())
}

fn check_eps(eps: f64, what: &str) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{what} must be positive and finite, got {eps}")))
    }
}

/// `log Σ_k exp(a_k + b_k)`.
#[inline]
fn lse_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b) {
        max = max.max(x + y);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x + y - max).exp();
    }
    max + s.ln()
}

/// Potentials recorded by an unrolled solve, one `(u, v)` pair per sweep.
#[derive(Debug, Default)]
pub struct Tape {
    pub u: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl Tape {
    pub fn retained_floats(&self) -> usize {
        self.u.iter().chain(&self.v).map(|x| x.len()).sum()
    }
}

fn solve(k: &DMatrix<f64>, eps: f64, cfg: &SinkhornConfig, mut tape: Option<&mut Tape>) -> Result<TransportPlan> {
    let n = check_square(k, "affinity")?;
    check_eps(eps, "epsilon")?;
    if !k.iter().all(|x| x.is_finite()) {
        return Err(Error::Data("affinity has non-finite entries".into()));
    }
    // Column j of `s` is contiguous (column-major), row i of K is column i of `st`.
    let s = k / eps;
    let st = s.transpose();
    let mut u: DVector<f64> = DVector::zeros(n);
    let mut v: DVector<f64> = DVector::zeros(n);
    let mut row_lse = vec![0.0; n];
    let mut iters = 0;
    let mut err = f64::INFINITY;

    loop {
        for i in 0..n {
            row_lse[i] = lse_sum(st.column(i).as_slice(), v.as_slice());
        }
        if iters > 0 {
            err = (0..n).map(|i| ((u[i] + row_lse[i]).exp() - 1.0).abs()).fold(0.0, f64::max);
            if err <= cfg.tol {
                break;
            }
        }
        if iters == cfg.max_iter {
            break;
        }
        for i in 0..n {
            u[i] = -row_lse[i];
        }
        for j in 0..n {
            v[j] = -lse_sum(s.column(j).as_slice(), u.as_slice());
        }
        iters += 1;
        if let Some(t) = tape.as_deref_mut() {
            t.u.push(u.clone());
            t.v.push(v.clone());
        }
    }
    if iters == 0 {
        err = (0..n).map(|i| ((u[i] + row_lse[i]).exp() - 1.0).abs()).fold(0.0, f64::max);
    }
    let converged = err <= cfg.tol;
    if !converged && cfg.tol >= 0.0 {
        log::debug!(
            "sinkhorn stopped after {iters} iterations with marginal error {err:e} (tol {:e})",
            cfg.tol
        );
    }
    let values = DMatrix::from_fn(n, n, |i, j| (u[i] + s[(i, j)] + v[j]).exp());
    Ok(TransportPlan {
        values,
        u,
        v,
        epsilon: eps,
        iterations_used: iters,
        marginal_error: err,
        converged,
    })
}

/// Log-domain Sinkhorn for `OT_ε(K)` with unit row and column marginals.
///
/// Returns the plan even when `max_iter` is hit; check `converged`.
pub fn sinkhorn(k: &DMatrix<f64>, eps: f64, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    solve(k, eps, cfg, None)
}

/// Transport cost, negative entropy and regularized objective of `plan` on `k`.
pub fn entropic_ot_value(plan: &TransportPlan, k: &DMatrix<f64>) -> Result<OtValue> {
    if k.shape() != plan.values.shape() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?}, affinity is {:?}",
            plan.values.shape(),
            k.shape()
        )));
    }
    let transport_cost: f64 = plan.values.iter().zip(k.iter()).map(|(t, c)| t * c).sum();
    let entropy: f64 = plan
        .values
        .iter()
        .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
        .sum();
    Ok(OtValue {
        value: -transport_cost + plan.epsilon * entropy,
        transport_cost,
        entropy,
    })
}

/// `KL(T* ‖ T)` from two solved plans, evaluated from the potentials.
pub fn kl_between_plans(
    target: &TransportPlan,
    k_star: &DMatrix<f64>,
    learned: &TransportPlan,
    k: &DMatrix<f64>,
) -> f64 {
    let n = target.n();
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..n {
            let t_star = target.values[(i, j)];
            if t_star > 0.0 {
                let log_star = target.u[i] + k_star[(i, j)] / target.epsilon + target.v[j];
                let log_t = learned.u[i] + k[(i, j)] / learned.epsilon + learned.v[j];
                total += t_star * (log_star - log_t);
            }
        }
    }
    total
}

fn check_pair(k: &DMatrix<f64>, k_star: &DMatrix<f64>) -> Result<()> {
    check_square(k, "K")?;
    check_square(k_star, "K*")?;
    if k.shape() != k_star.shape() {
        return Err(Error::DimensionMismatch(format!(
            "K is {:?} but K* is {:?}",
            k.shape(),
            k_star.shape()
        )));
    }
    Ok(())
}

/// KLOT value and gradient from a single pair of solves.
#[derive(Debug, Clone)]
pub struct KlotResult {
    pub value: f64,
    pub gradient: DMatrix<f64>,
    pub learned: TransportPlan,
    pub target: TransportPlan,
}

/// `KL(OT_ε*(K*) ‖ OT_ε(K))` together with `(OT_ε(K) − OT_ε*(K*))/ε`.
///
/// `K*` is treated as constant.
pub fn klot_with_gradient(
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    eps: f64,
    eps_star: f64,
    cfg: &SinkhornConfig,
) -> Result<KlotResult> {
    check_pair(k, k_star)?;
    check_eps(eps_star, "epsilon*")?;
    let target = sinkhorn(k_star, eps_star, cfg)?;
    let learned = sinkhorn(k, eps, cfg)?;
    let value = kl_between_plans(&target, k_star, &learned, k);
    let gradient = (&learned.values - &target.values) / eps;
    Ok(KlotResult { value, gradient, learned, target })
}

pub fn klot(k: &DMatrix<f64>, k_star: &DMatrix<f64>, eps: f64, eps_star: f64, cfg: &SinkhornConfig) -> Result<f64> {
    check_pair(k, k_star)?;
    check_eps(eps_star, "epsilon*")?;
    let target = sinkhorn(k_star, eps_star, cfg)?;
    let learned = sinkhorn(k, eps, cfg)?;
    Ok(kl_between_plans(&target, k_star, &learned, k))
}

pub fn klot_gradient(
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    eps: f64,
    eps_star: f64,
    cfg: &SinkhornConfig,
) -> Result<DMatrix<f64>> {
    Ok(klot_with_gradient(k, k_star, eps, eps_star, cfg)?.gradient)
}

/// Gradient of `KL(T* ‖ P_T(K))` where `P_T` is the plan after exactly
/// `iterations` Sinkhorn sweeps, by reverse-mode differentiation through the
/// recorded potentials. Returns the gradient and the tape it needed.
pub fn klot_gradient_unrolled(
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    eps: f64,
    eps_star: f64,
    target_cfg: &SinkhornConfig,
    iterations: usize,
) -> Result<(DMatrix<f64>, Tape)> {
    check_pair(k, k_star)?;
    check_eps(eps_star, "epsilon*")?;
    let target = sinkhorn(k_star, eps_star, target_cfg)?;
    let mut tape = Tape::default();
    let fixed = SinkhornConfig::fixed(iterations);
    let plan = solve(k, eps, &fixed, Some(&mut tape))?;
    let grad = backprop_through_sweeps(k, eps, &target.values, &plan, &tape);
    Ok((grad, tape))
}

fn backprop_through_sweeps(
    k: &DMatrix<f64>,
    eps: f64,
    target: &DMatrix<f64>,
    plan: &TransportPlan,
    tape: &Tape,
) -> DMatrix<f64> {
    let n = k.nrows();
    let s = k / eps;
    // loss = −⟨T*, log P⟩ + const, log P_ij = u_i + S_ij + v_j
    let mut grad_s = -target.clone();
    let mut grad_u: DVector<f64> = grad_s.column_sum();
    let mut grad_v: DVector<f64> = grad_s.row_sum().transpose();
    let zeros = DVector::zeros(n);
    debug_assert_eq!(plan.iterations_used, tape.u.len());

    for t in (0..tape.u.len()).rev() {
        let u_t = &tape.u[t];
        let v_t = &tape.v[t];
        let v_prev = if t == 0 { &zeros } else { &tape.v[t - 1] };
        // v_j = −LSE_i(S_ij + u_i): ∂v_j/∂S_ij = ∂v_j/∂u_i = −a_ij, a_ij = exp(S_ij + u_i + v_j)
        for j in 0..n {
            let gv = grad_v[j];
            if gv == 0.0 {
                continue;
            }
            for i in 0..n {
                let a = (s[(i, j)] + u_t[i] + v_t[j]).exp();
                grad_s[(i, j)] -= gv * a;
                grad_u[i] -= gv * a;
            }
        }
        // u_i = −LSE_j(S_ij + v'_j): ∂u_i/∂S_ij = ∂u_i/∂v'_j = −b_ij, b_ij = exp(S_ij + v'_j + u_i)
        let mut next_grad_v = DVector::zeros(n);
        for j in 0..n {
            for i in 0..n {
                let b = (s[(i, j)] + v_prev[j] + u_t[i]).exp();
                grad_s[(i, j)] -= grad_u[i] * b;
                next_grad_v[j] -= grad_u[i] * b;
            }
        }
        grad_v = next_grad_v;
        grad_u = DVector::zeros(n);
    }
    grad_s / eps
}

/// Central differences `(f(K + hE_ij) − f(K − hE_ij)) / 2h` for every entry.
pub fn fd_gradient<F>(f: F, k: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grad = DMatrix::zeros(k.nrows(), k.ncols());
    let mut probe = k.clone();
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let plus = f(&probe)?;
            probe[(i, j)] = orig - h;
            let minus = f(&probe)?;
            probe[(i, j)] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Data(format!("non-finite function value at entry ({i}, {j})")));
            }
            grad[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// One row of the gradient-cost profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub n: usize,
    pub epsilon: f64,
    pub iterations: usize,
    /// Floats kept alive between forward and backward by the closed-form path.
    pub closed_form_floats: usize,
    /// Floats kept alive by the unrolled path (recorded potentials).
    pub unrolled_floats: usize,
    pub solve_ms: f64,
    pub grad_ms: f64,
}

impl ProfileRow {
    pub const CSV_HEADER: &'static str = "n,epsilon,iterations,closed_form_floats,unrolled_floats,solve_ms,grad_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3}",
            self.n, self.epsilon, self.iterations, self.closed_form_floats, self.unrolled_floats, self.solve_ms, self.grad_ms
        )
    }
}

/// Retained-memory comparison between the closed-form gradient and a
/// reference that differentiates through the iterations.
///
/// For every `T` in `iter_counts` the learned plan gets exactly `T` sweeps on
/// a random cosine affinity of size `n`; the float counts are read off the
/// buffers each path actually keeps. Only the forward pass runs, since that
/// is where the unrolled tape is built.
pub fn grad_cost_profile(n: usize, eps: f64, iter_counts: &[usize], seed: u64) -> Result<Vec<ProfileRow>> {
    if n < 2 {
        return Err(Error::Parameter(format!("profile needs n >= 2, got {n}")));
    }
    check_eps(eps, "epsilon")?;
    let mut rng = rng::stream(seed, Stream::Bench);
    let dim = 16;
    let x = gaussian_matrix(&mut rng, n, dim, 1.0);
    let y = gaussian_matrix(&mut rng, n, dim, 1.0);
    let x_star = gaussian_matrix(&mut rng, n, dim, 1.0);
    let k = cosine_affinity_mat(&x, &y)?;
    let k_star = cosine_affinity_mat(&x_star, &y)?;

    // K* enters both paths identically, so it is solved once at the default tolerance.
    let target = sinkhorn(&k_star, eps, &SinkhornConfig::default())?;
    let mut rows = Vec::with_capacity(iter_counts.len());
    for &iters in iter_counts {
        // one set of sweeps yields the plan both paths share and the tape only unrolling keeps
        let mut tape = Tape::default();
        let start = Instant::now();
        let learned = solve(&k, eps, &SinkhornConfig::fixed(iters), Some(&mut tape))?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let grad = (&learned.values - &target.values) / eps;
        let grad_ms = start.elapsed().as_secs_f64() * 1e3;
        debug_assert!(grad.iter().all(|g| g.is_finite()));
        let closed_form_floats = learned.retained_floats() + target.retained_floats();
        let unrolled_floats = tape.retained_floats();

        rows.push(ProfileRow {
            n,
            epsilon: eps,
            iterations: learned.iterations_used,
            closed_form_floats,
            unrolled_floats,
            solve_ms,
            grad_ms,
        });
    }
    Ok(rows)
}

/// Floats the closed-form path keeps for size `n`: two dense plans and four
/// potentials. Matches [`grad_cost_profile`]'s measured column.
pub fn closed_form_retained_floats(n: usize) -> usize {
    2 * n * n + 4 * n
}

/// Floats the unrolled path keeps: one `(u, v)` pair per sweep.
pub fn unrolled_retained_floats(n: usize, iterations: usize) -> usize {
    2 * n * iterations
}
