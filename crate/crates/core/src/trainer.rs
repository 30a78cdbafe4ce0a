//! Semi-supervised training of linear alignment layers: a SigLIP loss on the
//! paired set plus `α · DIV(K, K*)` on unpaired batches, optimized with LION.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergences::{divergence_value_and_grad, siglip_loss, DivergenceSpec, SiglipParams};
use crate::embeddings::{cosine_affinity_mat, sample_batch, Batch, EmbeddingMatrix, PairedDataset, Preprocess, UnpairedPool};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, gaussian_matrix};
use crate::linear_teachers::{fit_teacher, LinearTeacher, TeacherSpec};
use crate::rng::{self, Stream};
use crate::semb::ModelContainer;

/// Gradients of `Σ_ij G_ij k(u_i, v_j)` with respect to the rows of `U` and `V`.
pub fn affinity_backward(
    grad_k: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if grad_k.shape() != (u.nrows(), v.nrows()) || u.ncols() != v.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "grad_K {:?} with U {:?} and V {:?}",
            grad_k.shape(),
            u.shape(),
            v.shape()
        )));
    }
    let norms = |m: &DMatrix<f64>| -> Result<DVector<f64>> {
        let mut out = DVector::zeros(m.nrows());
        for (i, row) in m.row_iter().enumerate() {
            let norm = row.norm();
            if norm < 1e-12 {
                return Err(Error::DegenerateRow { row: i, norm });
            }
            out[i] = norm;
        }
        Ok(out)
    };
    let nu = norms(u)?;
    let nv = norms(v)?;
    let mut uh = u.clone();
    for (i, mut row) in uh.row_iter_mut().enumerate() {
        row /= nu[i];
    }
    let mut vh = v.clone();
    for (j, mut row) in vh.row_iter_mut().enumerate() {
        row /= nv[j];
    }
    let k = &uh * vh.transpose();
    let gk = grad_k.component_mul(&k);
    let row_w = gk.column_sum();
    let col_w = gk.row_sum();

    let mut grad_u = grad_k * &vh;
    for i in 0..u.nrows() {
        let mut row = grad_u.row_mut(i);
        row -= uh.row(i) * row_w[i];
        row /= nu[i];
    }
    let mut grad_v = grad_k.tr_mul(&uh);
    for j in 0..v.nrows() {
        let mut row = grad_v.row_mut(j);
        row -= vh.row(j) * col_w[j];
        row /= nv[j];
    }
    Ok((grad_u, grad_v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LionParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One LION update in place.
///
/// # Panics
/// If the three slices differ in length.
pub fn lion_step(param: &mut [f64], grad: &[f64], momentum: &mut [f64], hp: &LionParams) {
    assert_eq!(param.len(), grad.len(), "lion_step: param/grad length");
    assert_eq!(param.len(), momentum.len(), "lion_step: param/momentum length");
    for ((p, &g), m) in param.iter_mut().zip(grad).zip(momentum.iter_mut()) {
        let update = sign(hp.beta1 * *m + (1.0 - hp.beta1) * g);
        *p -= hp.lr * (update + hp.weight_decay * *p);
        *m = hp.beta2 * *m + (1.0 - hp.beta2) * g;
    }
}

/// Cosine annealing from `lr_max` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::Parameter(format!("step {step} outside schedule of {total} steps")));
    }
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

const ALIGNER_KIND: u32 = 16;

/// Linear alignment layers `f(x) = W_f x`, `g(y) = W_g y` and the learned
/// SigLIP scale and bias. Inputs are preprocessed like the teacher's.
#[derive(Debug, Clone, PartialEq)]
pub struct Aligner {
    pub w_f: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
    pub siglip: SiglipParams,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub preprocess: Preprocess,
}

impl Aligner {
    pub fn d(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn embed_x(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        check_cols(x.d(), self.w_f.ncols(), "image")?;
        EmbeddingMatrix::new(self.preprocess.apply(x.matrix(), &self.mean_x)? * self.w_f.transpose())
    }

    pub fn embed_y(&self, y: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        check_cols(y.d(), self.w_g.ncols(), "text")?;
        EmbeddingMatrix::new(self.preprocess.apply(y.matrix(), &self.mean_y)? * self.w_g.transpose())
    }

    pub fn to_container(&self) -> ModelContainer {
        let mut c = ModelContainer::new(ALIGNER_KIND, self.d() as u64, self.preprocess.flags());
        c.insert("w_f", self.w_f.clone());
        c.insert("w_g", self.w_g.clone());
        c.insert_vector("mean_x", &self.mean_x);
        c.insert_vector("mean_y", &self.mean_y);
        c.insert("siglip", DMatrix::from_row_slice(1, 2, &[self.siglip.scale, self.siglip.bias]));
        c
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        if c.kind != ALIGNER_KIND {
            return Err(Error::Format(format!("container kind {} is not an aligner", c.kind)));
        }
        let sig = c.get("siglip")?;
        if sig.shape() != (1, 2) {
            return Err(Error::Format("siglip entry must be 1x2".into()));
        }
        let a = Self {
            w_f: c.get("w_f")?.clone(),
            w_g: c.get("w_g")?.clone(),
            siglip: SiglipParams { scale: sig[(0, 0)], bias: sig[(0, 1)] },
            mean_x: c.get_vector("mean_x")?,
            mean_y: c.get_vector("mean_y")?,
            preprocess: Preprocess::from_flags(c.flags),
        };
        if a.w_g.nrows() != a.d() || a.d() as u64 != c.dim {
            return Err(Error::Format("aligner container dimensions are inconsistent".into()));
        }
        Ok(a)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&ModelContainer::read(path)?)
    }
}

fn check_cols(got: usize, want: usize, side: &str) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!("{side} embeddings have d={got}, aligner expects {want}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Gaussian,
    Teacher,
}

/// Unpaired rows per modality in the default batch.
pub const DEFAULT_UNPAIRED_BATCH: usize = 11_000;

/// Converts a weight on the summed KLOT (total plan mass `n`) into the per-row
/// weight used by [`TrainConfig::alpha`], at the default unpaired batch size.
pub fn alpha_per_row(alpha_summed: f64) -> f64 {
    alpha_summed * DEFAULT_UNPAIRED_BATCH as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the per-row divergence (KLOT is divided by the batch size).
    pub alpha: f64,
    pub div: DivergenceSpec,
    pub n_steps: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// `None` uses the full paired set every step.
    pub batch_paired: Option<usize>,
    pub batch_unpaired_x: usize,
    pub batch_unpaired_y: usize,
    pub d: usize,
    pub seed: u64,
    pub lion_beta1: f64,
    pub lion_beta2: f64,
    pub init: Init,
    pub siglip_init: SiglipParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: alpha_per_row(1e-4),
            div: DivergenceSpec::default(),
            n_steps: 2000,
            lr_max: 1e-4,
            weight_decay: 1e-5,
            batch_paired: None,
            batch_unpaired_x: DEFAULT_UNPAIRED_BATCH,
            batch_unpaired_y: DEFAULT_UNPAIRED_BATCH,
            d: 1024,
            seed: 0,
            lion_beta1: 0.9,
            lion_beta2: 0.99,
            init: Init::Gaussian,
            siglip_init: SiglipParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.n_steps == 0 || self.d == 0 {
            return bad("n_steps and d must be >= 1".into());
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite() && self.weight_decay >= 0.0) {
            return bad("lr_max and weight_decay must be >= 0".into());
        }
        if self.batch_paired == Some(0) {
            return bad("paired batch must be >= 1".into());
        }
        if self.alpha > 0.0 {
            self.div.validate()?;
            if self.batch_unpaired_x != self.batch_unpaired_y || self.batch_unpaired_x == 0 {
                return bad(format!(
                    "unpaired batch sizes must be equal and >= 1 when alpha > 0, got {} and {}",
                    self.batch_unpaired_x, self.batch_unpaired_y
                ));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        if self.alpha == 0.0 {
            "supervised-baseline"
        } else {
            "semi-supervised"
        }
    }
}

/// Paired and unpaired data after the teacher's preprocessing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl PreparedData {
    pub fn new(paired: &PairedDataset, pool: &UnpairedPool, teacher: &LinearTeacher) -> Result<Self> {
        Ok(Self {
            a: teacher.prepare_x(paired.a.matrix())?,
            b: teacher.prepare_y(paired.b.matrix())?,
            x: teacher.prepare_x(pool.x.matrix())?,
            y: teacher.prepare_y(pool.y.matrix())?,
        })
    }
}

/// LION momentum for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m_f: DMatrix<f64>,
    pub m_g: DMatrix<f64>,
    pub m_siglip: [f64; 2],
}

impl OptState {
    pub fn new(aligner: &Aligner) -> Self {
        Self {
            m_f: DMatrix::zeros(aligner.w_f.nrows(), aligner.w_f.ncols()),
            m_g: DMatrix::zeros(aligner.w_g.nrows(), aligner.w_g.ncols()),
            m_siglip: [0.0; 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    /// Divergence value before weighting by α.
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_f: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
    pub scale: f64,
    pub bias: f64,
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

/// Total loss and its gradient for one batch without updating anything.
pub fn loss_and_gradients(
    aligner: &Aligner,
    batch: &Batch,
    data: &PreparedData,
    teacher: &LinearTeacher,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (a, b) = if batch.paired_idx.len() == data.a.nrows() && batch.paired_idx.iter().enumerate().all(|(i, &j)| i == j) {
        (data.a.clone(), data.b.clone())
    } else {
        (rows(&data.a, &batch.paired_idx), rows(&data.b, &batch.paired_idx))
    };
    let fp = &a * aligner.w_f.transpose();
    let gp = &b * aligner.w_g.transpose();
    let kp = cosine_affinity_mat(&fp, &gp)?;
    let sup = siglip_loss(&kp, &aligner.siglip)?;
    let (dfp, dgp) = affinity_backward(&sup.grad_k, &fp, &gp)?;
    let mut grad_f = dfp.tr_mul(&a);
    let mut grad_g = dgp.tr_mul(&b);

    let mut regularizer = 0.0;
    if cfg.alpha > 0.0 {
        let xb = rows(&data.x, &batch.unpaired_x_idx);
        let yb = rows(&data.y, &batch.unpaired_y_idx);
        let k_star = teacher.affinity_prepared(&xb, &yb)?;
        let fx = &xb * aligner.w_f.transpose();
        let gy = &yb * aligner.w_g.transpose();
        let k = cosine_affinity_mat(&fx, &gy)?;
        let (value, grad_k) = divergence_value_and_grad(&cfg.div, &k, &k_star)?;
        let (dfx, dgy) = affinity_backward(&(grad_k * cfg.alpha), &fx, &gy)?;
        grad_f += dfx.tr_mul(&xb);
        grad_g += dgy.tr_mul(&yb);
        regularizer = value;
    }
    let loss = LossBreakdown {
        supervised: sup.value,
        regularizer,
        total: sup.value + cfg.alpha * regularizer,
    };
    Ok((loss, Gradients { w_f: grad_f, w_g: grad_g, scale: sup.grad_scale, bias: sup.grad_bias }))
}

/// One optimization step; returns the loss at the parameters before the update.
pub fn train_step(
    aligner: &mut Aligner,
    opt: &mut OptState,
    batch: &Batch,
    data: &PreparedData,
    teacher: &LinearTeacher,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let diverged = |what: String| Error::Divergence { step, what };
    let (loss, grads) = loss_and_gradients(aligner, batch, data, teacher, cfg).map_err(|e| match e {
        Error::DegenerateRow { .. } | Error::UndefinedCka(_) | Error::Data(_) => diverged(e.to_string()),
        other => other,
    })?;
    if !loss.total.is_finite() {
        return Err(diverged(format!("loss is {}", loss.total)));
    }
    if !all_finite(&grads.w_f) || !all_finite(&grads.w_g) || !grads.scale.is_finite() || !grads.bias.is_finite() {
        return Err(diverged("non-finite gradient".into()));
    }
    let hp = LionParams {
        lr: cosine_lr(step, cfg.n_steps, cfg.lr_max)?,
        beta1: cfg.lion_beta1,
        beta2: cfg.lion_beta2,
        weight_decay: cfg.weight_decay,
    };
    lion_step(aligner.w_f.as_mut_slice(), grads.w_f.as_slice(), opt.m_f.as_mut_slice(), &hp);
    lion_step(aligner.w_g.as_mut_slice(), grads.w_g.as_slice(), opt.m_g.as_mut_slice(), &hp);
    let mut sig = [aligner.siglip.scale, aligner.siglip.bias];
    lion_step(&mut sig, &[grads.scale, grads.bias], &mut opt.m_siglip, &LionParams { weight_decay: 0.0, ..hp });
    aligner.siglip = SiglipParams { scale: sig[0], bias: sig[1] };
    Ok(loss)
}

/// Fresh aligner for `cfg`, from the teacher when requested and shapes allow.
pub fn init_aligner(teacher: &LinearTeacher, cfg: &TrainConfig) -> Aligner {
    let (w_f, w_g) = match cfg.init {
        Init::Teacher if teacher.d_prime() == cfg.d => (teacher.w_x.clone(), teacher.w_y.clone()),
        init => {
            if init == Init::Teacher {
                log::warn!("teacher init needs d = d' ({} != {}); using Gaussian init", cfg.d, teacher.d_prime());
            }
            let mut rng = rng::stream(cfg.seed, Stream::Init);
            let (dx, dy) = (teacher.d_x(), teacher.d_y());
            let w_f = gaussian_matrix(&mut rng, cfg.d, dx, 1.0 / (dx as f64).sqrt());
            let w_g = gaussian_matrix(&mut rng, cfg.d, dy, 1.0 / (dy as f64).sqrt());
            (w_f, w_g)
        }
    };
    Aligner {
        w_f,
        w_g,
        siglip: cfg.siglip_init,
        mean_x: teacher.mean_x.clone(),
        mean_y: teacher.mean_y.clone(),
        preprocess: teacher.preprocess,
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub supervised: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub label: String,
    pub steps: Vec<StepRecord>,
    pub aligner: Aligner,
    pub teacher: LinearTeacher,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "step,lr,supervised,regularizer,total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.step, r.lr, r.supervised, r.regularizer, r.total));
        }
        out
    }

    pub fn final_loss(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// Fits the teacher on the paired set, then trains the aligner.
pub fn train_aligner(paired: &PairedDataset, pool: &UnpairedPool, teacher: &TeacherSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    let teacher = fit_teacher(paired, teacher)?;
    train_with_teacher(paired, pool, teacher, cfg)
}

/// Trains the aligner against an already fitted teacher.
pub fn train_with_teacher(
    paired: &PairedDataset,
    pool: &UnpairedPool,
    teacher: LinearTeacher,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if paired.a.d() != teacher.d_x() || paired.b.d() != teacher.d_y() || pool.x.d() != teacher.d_x() || pool.y.d() != teacher.d_y() {
        return Err(Error::DimensionMismatch("data dimensions do not match the teacher".into()));
    }
    let start = Instant::now();
    let data = PreparedData::new(paired, pool, &teacher)?;
    let mut aligner = init_aligner(&teacher, cfg);
    let mut opt = OptState::new(&aligner);

    let n_pair = cfg.batch_paired.map_or(paired.len(), |b| b.min(paired.len()));
    let n_unpaired = if cfg.alpha > 0.0 {
        let n = cfg.batch_unpaired_x.min(pool.x.n()).min(pool.y.n());
        if n < cfg.batch_unpaired_x {
            log::info!("unpaired batch clamped to pool size {n}");
        }
        n
    } else {
        0
    };
    let full: Vec<usize> = (0..paired.len()).collect();

    let mut steps = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let mut batch = sample_batch(paired, pool, n_pair, n_unpaired, n_unpaired, step_seed(cfg.seed, step))?;
        if n_pair == paired.len() {
            batch.paired_idx = full.clone();
        }
        let loss = train_step(&mut aligner, &mut opt, &batch, &data, &teacher, cfg, step)?;
        steps.push(StepRecord {
            step,
            lr: cosine_lr(step, cfg.n_steps, cfg.lr_max)?,
            supervised: loss.supervised,
            regularizer: loss.regularizer,
            total: loss.total,
        });
        if step % 100 == 0 {
            log::debug!("step {step}: total {:.6} (sup {:.6}, reg {:.6})", loss.total, loss.supervised, loss.regularizer);
        }
    }
    Ok(TrainReport {
        label: cfg.label().to_string(),
        steps,
        aligner,
        teacher,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}
