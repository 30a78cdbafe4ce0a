//! Linear teachers fit on the paired set: orthogonal Procrustes, CCA and a
//! linear contrastive model. A fitted teacher supplies the target affinity
//! for unpaired batches.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergences::{infonce_loss, siglip_loss, SiglipParams};
use crate::embeddings::{cosine_affinity_mat, AffinityMatrix, EmbeddingMatrix, PairedDataset, Preprocess};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, inv_sqrt_psd, sorted_svd};
use crate::rng::{self, Stream};
use crate::semb::ModelContainer;
use crate::trainer::{affinity_backward, cosine_lr, lion_step, LionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Procrustes,
    Cca,
    Contrastive,
}

impl TeacherKind {
    fn tag(self) -> u32 {
        match self {
            Self::Procrustes => 0,
            Self::Cca => 1,
            Self::Contrastive => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Self::Procrustes),
            1 => Ok(Self::Cca),
            2 => Ok(Self::Contrastive),
            t => Err(Error::Format(format!("unknown teacher kind tag {t}"))),
        }
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "procrustes" => Ok(Self::Procrustes),
            "cca" => Ok(Self::Cca),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::Parameter(format!("unknown teacher kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Procrustes => "procrustes",
            Self::Cca => "cca",
            Self::Contrastive => "contrastive",
        })
    }
}

/// A pair of linear maps into a shared `d'`-dimensional space.
///
/// `w_x` is `d' × d_x`, `w_y` is `d' × d_y`. Inputs are preprocessed with the
/// stored centering statistics before projection, both while fitting and in
/// [`teacher_affinity`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTeacher {
    pub kind: TeacherKind,
    pub w_x: DMatrix<f64>,
    pub w_y: DMatrix<f64>,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub preprocess: Preprocess,
    /// Leading singular values of the (whitened) cross-covariance; canonical
    /// correlations for CCA. Empty for the contrastive teacher.
    pub singular_values: DVector<f64>,
}

impl LinearTeacher {
    pub fn d_prime(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.w_x.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.w_y.ncols()
    }

    pub fn prepare_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.preprocess.apply(x, &self.mean_x)
    }

    pub fn prepare_y(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.preprocess.apply(y, &self.mean_y)
    }

    /// Cosine affinity of inputs that are already preprocessed.
    pub fn affinity_prepared(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d_x() || y.ncols() != self.d_y() {
            return Err(Error::DimensionMismatch(format!(
                "teacher maps d_x={}, d_y={}; got {} and {}",
                self.d_x(),
                self.d_y(),
                x.ncols(),
                y.ncols()
            )));
        }
        cosine_affinity_mat(&(x * self.w_x.transpose()), &(y * self.w_y.transpose()))
    }

    /// Projects raw image-side embeddings into the shared space.
    pub fn embed_x(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let prepared = self.prepare_x(x.matrix())?;
        EmbeddingMatrix::new(prepared * self.w_x.transpose())
    }

    pub fn embed_y(&self, y: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let prepared = self.prepare_y(y.matrix())?;
        EmbeddingMatrix::new(prepared * self.w_y.transpose())
    }

    pub fn to_container(&self) -> ModelContainer {
        let mut c = ModelContainer::new(self.kind.tag(), self.d_prime() as u64, self.preprocess.flags());
        c.insert("w_x", self.w_x.clone());
        c.insert("w_y", self.w_y.clone());
        c.insert_vector("mean_x", &self.mean_x);
        c.insert_vector("mean_y", &self.mean_y);
        c.insert_vector("singular_values", &self.singular_values);
        c
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        let kind = TeacherKind::from_tag(c.kind)?;
        let t = Self {
            kind,
            w_x: c.get("w_x")?.clone(),
            w_y: c.get("w_y")?.clone(),
            mean_x: c.get_vector("mean_x")?,
            mean_y: c.get_vector("mean_y")?,
            preprocess: Preprocess::from_flags(c.flags),
            singular_values: c.get_vector("singular_values")?,
        };
        if t.d_prime() as u64 != c.dim || t.w_y.nrows() != t.d_prime() {
            return Err(Error::Format("teacher container dimensions are inconsistent".into()));
        }
        Ok(t)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&ModelContainer::read(path)?)
    }
}

/// `K[X W_xᵀ, Y W_yᵀ]` after the teacher's preprocessing.
pub fn teacher_affinity(teacher: &LinearTeacher, x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<AffinityMatrix> {
    let xp = teacher.prepare_x(x.matrix())?;
    let yp = teacher.prepare_y(y.matrix())?;
    teacher.affinity_prepared(&xp, &yp).map(AffinityMatrix)
}

/// `⟨A Pᵀ, B Qᵀ⟩`, the quantity both closed forms maximize.
pub fn alignment_objective(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (a * p.transpose()).dot(&(b * q.transpose()))
}

struct Prepared {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
}

fn prepare(paired: &PairedDataset, pre: Preprocess) -> Result<Prepared> {
    if paired.len() < 2 {
        return Err(Error::Parameter(format!("need at least 2 pairs, got {}", paired.len())));
    }
    let mean_x = pre.fit(&paired.a);
    let mean_y = pre.fit(&paired.b);
    Ok(Prepared {
        a: pre.apply(paired.a.matrix(), &mean_x)?,
        b: pre.apply(paired.b.matrix(), &mean_y)?,
        mean_x,
        mean_y,
    })
}

fn check_d_prime(d_prime: usize, paired: &PairedDataset) -> Result<()> {
    let max = paired.a.d().min(paired.b.d());
    if d_prime == 0 || d_prime > max {
        return Err(Error::Parameter(format!("d' must be in 1..={max}, got {d_prime}")));
    }
    Ok(())
}

fn warn_if_rank_deficient(s: &DVector<f64>, d_prime: usize, what: &str) {
    let tol = s.iter().copied().fold(0.0, f64::max) * 1e-10;
    let rank = s.iter().filter(|&&x| x > tol).count();
    if rank < d_prime {
        log::warn!("{what}: cross-covariance rank {rank} < d'={d_prime}; trailing directions are arbitrary");
    }
}

/// Closed-form Procrustes alignment: with `AᵀB = U Σ Vᵀ`, the rows of `W_x`
/// and `W_y` are the leading `d'` left and right singular vectors.
pub fn fit_procrustes(paired: &PairedDataset, d_prime: usize, pre: Preprocess) -> Result<LinearTeacher> {
    check_d_prime(d_prime, paired)?;
    let p = prepare(paired, pre)?;
    let svd = sorted_svd(&p.a.tr_mul(&p.b));
    warn_if_rank_deficient(&svd.singular_values, d_prime, "procrustes");
    Ok(LinearTeacher {
        kind: TeacherKind::Procrustes,
        w_x: svd.u.columns(0, d_prime).transpose(),
        w_y: svd.v.columns(0, d_prime).transpose(),
        mean_x: p.mean_x,
        mean_y: p.mean_y,
        preprocess: pre,
        singular_values: svd.singular_values.rows(0, d_prime).into_owned(),
    })
}

/// Closed-form CCA. `λ` is added to every eigenvalue of `Σ_xx = AᵀA` and
/// `Σ_yy = BᵀB` before the inverse square roots; with
/// `Σ_xx^{-1/2} Σ_xy Σ_yy^{-1/2} = U Σ Vᵀ`,
/// `W_x = U_{:,1:d'}ᵀ Σ_xx^{-1/2}` and `W_y = V_{:,1:d'}ᵀ Σ_yy^{-1/2}`.
pub fn fit_cca(paired: &PairedDataset, d_prime: usize, lambda: f64, pre: Preprocess) -> Result<LinearTeacher> {
    check_d_prime(d_prime, paired)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let p = prepare(paired, pre)?;
    let wxx = inv_sqrt_psd(&p.a.tr_mul(&p.a), lambda)?;
    let wyy = inv_sqrt_psd(&p.b.tr_mul(&p.b), lambda)?;
    let m = &wxx * p.a.tr_mul(&p.b) * &wyy;
    let svd = sorted_svd(&m);
    warn_if_rank_deficient(&svd.singular_values, d_prime, "cca");
    Ok(LinearTeacher {
        kind: TeacherKind::Cca,
        w_x: svd.u.columns(0, d_prime).transpose() * wxx,
        w_y: svd.v.columns(0, d_prime).transpose() * wyy,
        mean_x: p.mean_x,
        mean_y: p.mean_y,
        preprocess: pre,
        singular_values: svd.singular_values.rows(0, d_prime).into_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ContrastiveLoss {
    Siglip,
    Infonce { temperature: f64 },
}

/// Training settings for [`fit_linear_contrastive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: ContrastiveLoss,
    pub siglip_init: SiglipParams,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_max: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            loss: ContrastiveLoss::Siglip,
            siglip_init: SiglipParams::default(),
            seed: 0,
        }
    }
}

/// Linear maps trained with a contrastive loss on `K[A W_xᵀ, B W_yᵀ]`
/// against identity targets, optimized with LION on the full paired set.
pub fn fit_linear_contrastive(
    paired: &PairedDataset,
    d_shared: usize,
    cfg: &ContrastiveConfig,
    pre: Preprocess,
) -> Result<LinearTeacher> {
    if d_shared == 0 {
        return Err(Error::Parameter("d_shared must be >= 1".into()));
    }
    let p = prepare(paired, pre)?;
    let mut rng = rng::stream(cfg.seed, Stream::Teacher);
    let mut w_x = gaussian_matrix(&mut rng, d_shared, p.a.ncols(), 1.0 / (p.a.ncols() as f64).sqrt());
    let mut w_y = gaussian_matrix(&mut rng, d_shared, p.b.ncols(), 1.0 / (p.b.ncols() as f64).sqrt());
    let mut siglip = cfg.siglip_init;
    let mut m_x = DMatrix::zeros(d_shared, p.a.ncols());
    let mut m_y = DMatrix::zeros(d_shared, p.b.ncols());
    let mut m_sig = [0.0; 2];

    for step in 0..cfg.steps {
        let fx = &p.a * w_x.transpose();
        let gy = &p.b * w_y.transpose();
        let k = cosine_affinity_mat(&fx, &gy).map_err(|e| Error::Divergence { step, what: e.to_string() })?;
        let (value, grad_k, grad_sig) = match cfg.loss {
            ContrastiveLoss::Siglip => {
                let out = siglip_loss(&k, &siglip)?;
                (out.value, out.grad_k, [out.grad_scale, out.grad_bias])
            }
            ContrastiveLoss::Infonce { temperature } => {
                let (v, g) = infonce_loss(&k, temperature)?;
                (v, g, [0.0, 0.0])
            }
        };
        if !value.is_finite() {
            return Err(Error::Divergence { step, what: format!("contrastive loss is {value}") });
        }
        let (g_fx, g_gy) = affinity_backward(&grad_k, &fx, &gy)?;
        let grad_wx = g_fx.tr_mul(&p.a);
        let grad_wy = g_gy.tr_mul(&p.b);
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max)?;
        let hp = LionParams { lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay };
        lion_step(w_x.as_mut_slice(), grad_wx.as_slice(), m_x.as_mut_slice(), &hp);
        lion_step(w_y.as_mut_slice(), grad_wy.as_slice(), m_y.as_mut_slice(), &hp);
        if matches!(cfg.loss, ContrastiveLoss::Siglip) {
            let mut sig = [siglip.scale, siglip.bias];
            lion_step(&mut sig, &grad_sig, &mut m_sig, &LionParams { weight_decay: 0.0, ..hp });
            siglip = SiglipParams { scale: sig[0], bias: sig[1] };
        }
    }
    Ok(LinearTeacher {
        kind: TeacherKind::Contrastive,
        w_x,
        w_y,
        mean_x: p.mean_x,
        mean_y: p.mean_y,
        preprocess: pre,
        singular_values: DVector::zeros(0),
    })
}

/// Everything needed to fit a teacher of any kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Shared dimension; `None` picks `min(d_x, d_y)` for the closed forms and
    /// [`DEFAULT_CONTRASTIVE_DIM`] for the contrastive teacher.
    pub d_prime: Option<usize>,
    pub lambda: f64,
    pub preprocess: Preprocess,
    pub contrastive: ContrastiveConfig,
}

pub const DEFAULT_CCA_LAMBDA: f64 = 0.1;
pub const DEFAULT_CONTRASTIVE_DIM: usize = 1024;

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Cca,
            d_prime: None,
            lambda: DEFAULT_CCA_LAMBDA,
            preprocess: Preprocess::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TeacherSpec {
    pub fn resolved_d_prime(&self, d_x: usize, d_y: usize) -> usize {
        self.d_prime.unwrap_or(match self.kind {
            TeacherKind::Contrastive => DEFAULT_CONTRASTIVE_DIM,
            _ => d_x.min(d_y),
        })
    }
}

pub fn fit_teacher(paired: &PairedDataset, spec: &TeacherSpec) -> Result<LinearTeacher> {
    let d_prime = spec.resolved_d_prime(paired.a.d(), paired.b.d());
    match spec.kind {
        TeacherKind::Procrustes => fit_procrustes(paired, d_prime, spec.preprocess),
        TeacherKind::Cca => fit_cca(paired, d_prime, spec.lambda, spec.preprocess),
        TeacherKind::Contrastive => fit_linear_contrastive(paired, d_prime, &spec.contrastive, spec.preprocess),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, random_orthogonal, random_orthonormal_rows};
    use crate::rng::stream_at;

    fn gaussian_pairs(seed: u64, n: usize, dx: usize, dy: usize) -> PairedDataset {
        let mut rng = stream_at(seed, 300);
        PairedDataset::new(
            EmbeddingMatrix::new(gaussian_matrix(&mut rng, n, dx, 1.0)).unwrap(),
            EmbeddingMatrix::new(gaussian_matrix(&mut rng, n, dy, 1.0)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn procrustes_rows_are_orthonormal() {
        let paired = gaussian_pairs(1, 40, 7, 5);
        let t = fit_procrustes(&paired, 4, Preprocess::default()).unwrap();
        let id = DMatrix::identity(4, 4);
        assert!(max_abs_diff(&(&t.w_x * t.w_x.transpose()), &id) < 1e-6);
        assert!(max_abs_diff(&(&t.w_y * t.w_y.transpose()), &id) < 1e-6);
    }

    #[test]
    fn procrustes_self_alignment() {
        let paired = gaussian_pairs(2, 30, 5, 5);
        let a = Preprocess::default().apply(paired.a.matrix(), &paired.a.matrix().row_mean().transpose()).unwrap();
        let same = PairedDataset::new(EmbeddingMatrix::new(a.clone()).unwrap(), EmbeddingMatrix::new(a.clone()).unwrap()).unwrap();
        let t = fit_procrustes(&same, 5, Preprocess::NONE).unwrap();
        assert!(max_abs_diff(&t.w_x, &t.w_y) < 1e-8);
        let eig_sum: f64 = a.tr_mul(&a).symmetric_eigen().eigenvalues.sum();
        let obj = alignment_objective(&a, &a, &t.w_x, &t.w_y);
        assert!((obj - eig_sum).abs() < 1e-8);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let paired = gaussian_pairs(3, 50, 6, 6);
        let r = random_orthogonal(&mut stream_at(3, 1), 6);
        let rotated = PairedDataset::new(paired.a.clone(), EmbeddingMatrix::new(paired.a.matrix() * &r).unwrap()).unwrap();
        let t = fit_procrustes(&rotated, 6, Preprocess::default()).unwrap();
        let k = teacher_affinity(&t, &rotated.a, &rotated.b).unwrap();
        for i in 0..50 {
            assert!(k.matrix()[(i, i)] >= 0.999);
        }
    }

    #[test]
    fn procrustes_objective_invariant_to_shared_rotation() {
        let paired = gaussian_pairs(4, 30, 6, 5);
        let t = fit_procrustes(&paired, 3, Preprocess::NONE).unwrap();
        let r = random_orthogonal(&mut stream_at(4, 1), 3);
        let a = paired.a.matrix();
        let b = paired.b.matrix();
        let base = alignment_objective(a, b, &t.w_x, &t.w_y);
        let rotated = alignment_objective(a, b, &(&r * &t.w_x), &(&r * &t.w_y));
        assert!((base - rotated).abs() < 1e-6);
    }

    #[test]
    fn d_prime_validation() {
        let paired = gaussian_pairs(5, 10, 3, 4);
        assert!(matches!(fit_procrustes(&paired, 4, Preprocess::default()), Err(Error::Parameter(_))));
        assert!(matches!(fit_cca(&paired, 0, 0.1, Preprocess::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn cca_self_correlation_is_one() {
        let paired = gaussian_pairs(6, 60, 4, 4);
        let same = PairedDataset::new(paired.a.clone(), paired.a.clone()).unwrap();
        let t = fit_cca(&same, 4, 0.0, Preprocess::default()).unwrap();
        for s in t.singular_values.iter() {
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn cca_whitening_constraint() {
        let paired = gaussian_pairs(7, 80, 5, 4);
        let t = fit_cca(&paired, 3, 0.0, Preprocess::default()).unwrap();
        let a = t.prepare_x(paired.a.matrix()).unwrap();
        let proj = &a * t.w_x.transpose();
        assert!(max_abs_diff(&proj.tr_mul(&proj), &DMatrix::identity(3, 3)) < 1e-5);
    }

    #[test]
    fn cca_regularization_handles_zero_variance_column() {
        let mut paired = gaussian_pairs(8, 40, 4, 3);
        let mut a = paired.a.matrix().clone();
        a.column_mut(2).fill(1.0);
        paired.a = EmbeddingMatrix::new(a).unwrap();
        let pre = Preprocess { center: true, normalize: false };
        assert!(matches!(fit_cca(&paired, 3, 0.0, pre), Err(Error::Singular(_))));
        let t = fit_cca(&paired, 3, 0.1, pre).unwrap();
        assert!(t.w_x.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cca_on_whitened_data_matches_procrustes() {
        // Columns already centered and orthonormal: Σ_xx = Σ_yy = I.
        let mut rng = stream_at(9, 0);
        let whiten = |m: DMatrix<f64>| {
            let mean = m.row_mean();
            let mut c = m.clone();
            for mut row in c.row_iter_mut() {
                row -= &mean;
            }
            c.qr().q()
        };
        let a = whiten(gaussian_matrix(&mut rng, 40, 4, 1.0));
        let b = whiten(&a * gaussian_matrix(&mut rng, 4, 3, 1.0) + gaussian_matrix(&mut rng, 40, 3, 0.5));
        let paired = PairedDataset::new(EmbeddingMatrix::new(a).unwrap(), EmbeddingMatrix::new(b).unwrap()).unwrap();
        let pre = Preprocess { center: true, normalize: false };
        let cca = fit_cca(&paired, 3, 0.0, pre).unwrap();
        let pro = fit_procrustes(&paired, 3, pre).unwrap();
        for k in 0..3 {
            for (w1, w2) in [(&cca.w_x, &pro.w_x), (&cca.w_y, &pro.w_y)] {
                let r1 = w1.row(k);
                let r2 = w2.row(k);
                let diff = (r1 - r2).amax().min((r1 + r2).amax());
                assert!(diff < 1e-5, "direction {k}: {diff}");
            }
        }
    }

    #[test]
    fn contrastive_separates_two_pairs() {
        let a = EmbeddingMatrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let paired = PairedDataset::new(a.clone(), a).unwrap();
        let cfg = ContrastiveConfig { steps: 300, lr_max: 1e-2, ..Default::default() };
        let t = fit_linear_contrastive(&paired, 4, &cfg, Preprocess::NONE).unwrap();
        let k = teacher_affinity(&t, &paired.a, &paired.b).unwrap();
        let k = k.matrix();
        let margin = k[(0, 0)].min(k[(1, 1)]) - k[(0, 1)].max(k[(1, 0)]);
        assert!(margin > 0.5, "margin {margin}");
    }

    #[test]
    fn contrastive_is_deterministic() {
        let paired = gaussian_pairs(10, 12, 4, 3);
        let cfg = ContrastiveConfig { steps: 20, lr_max: 1e-3, seed: 5, ..Default::default() };
        let t1 = fit_linear_contrastive(&paired, 3, &cfg, Preprocess::default()).unwrap();
        let t2 = fit_linear_contrastive(&paired, 3, &cfg, Preprocess::default()).unwrap();
        assert_eq!(t1.w_x.as_slice(), t2.w_x.as_slice());
        let cfg = ContrastiveConfig { loss: ContrastiveLoss::Infonce { temperature: 0.1 }, ..cfg };
        assert!(fit_linear_contrastive(&paired, 3, &cfg, Preprocess::default()).is_ok());
    }

    #[test]
    fn teacher_affinity_examples() {
        let x = EmbeddingMatrix::from_rows(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let t = LinearTeacher {
            kind: TeacherKind::Procrustes,
            w_x: DMatrix::identity(2, 2),
            w_y: DMatrix::identity(2, 2),
            mean_x: DVector::zeros(2),
            mean_y: DVector::zeros(2),
            preprocess: Preprocess::NONE,
            singular_values: DVector::zeros(0),
        };
        let k = teacher_affinity(&t, &x, &x).unwrap();
        for i in 0..3 {
            assert!((k.matrix()[(i, i)] - 1.0).abs() < 1e-12);
        }
        let one = x.select_rows(&[0]);
        let two = x.select_rows(&[1]);
        let k = teacher_affinity(&t, &one, &two).unwrap();
        assert_eq!(k.matrix().shape(), (1, 1));
        assert!((k.matrix()[(0, 0)] - cosine_affinity_mat(one.matrix(), two.matrix()).unwrap()[(0, 0)]).abs() < 1e-15);
        let wrong = EmbeddingMatrix::from_rows(1, 3, &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(teacher_affinity(&t, &wrong, &x), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn container_round_trip() {
        let paired = gaussian_pairs(11, 20, 4, 3);
        let t = fit_cca(&paired, 2, 0.1, Preprocess::default()).unwrap();
        let back = LinearTeacher::from_container(&ModelContainer::decode(&t.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_container().encode(), t.to_container().encode());
    }

    #[test]
    fn procrustes_beats_random_candidates() {
        let paired = gaussian_pairs(12, 50, 8, 6);
        let t = fit_procrustes(&paired, 6, Preprocess::NONE).unwrap();
        let (a, b) = (paired.a.matrix(), paired.b.matrix());
        let best = alignment_objective(a, b, &t.w_x, &t.w_y);
        let mut rng = stream_at(12, 1);
        for _ in 0..1000 {
            let p = random_orthonormal_rows(&mut rng, 6, 8);
            let q = random_orthonormal_rows(&mut rng, 6, 6);
            assert!(alignment_objective(a, b, &p, &q) <= best + 1e-9);
        }
    }

    fn whiten_rows(g: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let c = g * sigma * g.transpose();
        let e = c.symmetric_eigen();
        let inv = DMatrix::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x.sqrt()));
        &e.eigenvectors * inv * e.eigenvectors.transpose() * g
    }

    #[test]
    fn cca_beats_random_whitened_candidates() {
        let paired = gaussian_pairs(13, 60, 5, 4);
        let pre = Preprocess { center: true, normalize: false };
        let t = fit_cca(&paired, 3, 0.0, pre).unwrap();
        let a = t.prepare_x(paired.a.matrix()).unwrap();
        let b = t.prepare_y(paired.b.matrix()).unwrap();
        let best = alignment_objective(&a, &b, &t.w_x, &t.w_y);
        assert!((best - t.singular_values.sum()).abs() < 1e-8);
        let (sxx, syy) = (a.tr_mul(&a), b.tr_mul(&b));
        let mut rng = stream_at(13, 1);
        for _ in 0..1000 {
            let p = whiten_rows(&gaussian_matrix(&mut rng, 3, 5, 1.0), &sxx);
            let q = whiten_rows(&gaussian_matrix(&mut rng, 3, 4, 1.0), &syy);
            assert!(alignment_objective(&a, &b, &p, &q) <= best + 1e-9);
        }
    }

    #[test]
    fn cca_matches_generalized_eigen_oracle() {
        let mut rng = stream_at(14, 0);
        let z = gaussian_matrix(&mut rng, 200, 3, 1.0);
        let a = &z * gaussian_matrix(&mut rng, 3, 5, 1.0) + gaussian_matrix(&mut rng, 200, 5, 0.7);
        let b = &z * gaussian_matrix(&mut rng, 3, 4, 1.0) + gaussian_matrix(&mut rng, 200, 4, 0.7);
        let paired = PairedDataset::new(EmbeddingMatrix::new(a).unwrap(), EmbeddingMatrix::new(b).unwrap()).unwrap();
        let pre = Preprocess { center: true, normalize: false };
        let t = fit_cca(&paired, 4, 0.0, pre).unwrap();

        // ρ² are the eigenvalues of Lx⁻¹ Σxy Σyy⁻¹ Σyx Lx⁻ᵀ with Σxx = Lx Lxᵀ.
        let ac = t.prepare_x(paired.a.matrix()).unwrap();
        let bc = t.prepare_y(paired.b.matrix()).unwrap();
        let sxx = ac.tr_mul(&ac);
        let syy = bc.tr_mul(&bc);
        let sxy = ac.tr_mul(&bc);
        let lx = sxx.cholesky().unwrap().l();
        let lx_inv = lx.try_inverse().unwrap();
        let m = &lx_inv * &sxy * syy.try_inverse().unwrap() * sxy.transpose() * lx_inv.transpose();
        let mut rho: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().map(|x| x.max(0.0).sqrt()).collect();
        rho.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for k in 0..4 {
            assert!((t.singular_values[k] - rho[k]).abs() < 1e-6, "{k}: {} vs {}", t.singular_values[k], rho[k]);
        }
    }

    #[test]
    fn contrastive_initial_positive_term() {
        let k = DMatrix::from_element(1, 1, 0.0);
        let out = siglip_loss(&k, &SiglipParams::default()).unwrap();
        assert!((out.value - 10.0000454).abs() < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn teacher_affinity_is_bounded(seed in 0u64..1000, n in 3usize..12) {
            let paired = gaussian_pairs(seed, n, 4, 3);
            let t = fit_procrustes(&paired, 3, Preprocess::default()).unwrap();
            let k = teacher_affinity(&t, &paired.a, &paired.b).unwrap();
            proptest::prop_assert!(k.matrix().iter().all(|x| x.abs() <= 1.0 + 1e-12));
        }
    }
}
