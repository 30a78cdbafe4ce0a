use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use otalign::divergences::{DivergenceKind, DivergenceSpec, SiglipParams};
use otalign::embeddings::{EmbeddingMatrix, PairedDataset, Preprocess, UnpairedPool};
use otalign::entropic_ot::{grad_cost_profile, SinkhornConfig};
use otalign::eval::{identity_gt, retrieval_recall, zero_shot_classify};
use otalign::linear_teachers::{self as teachers, ContrastiveConfig, ContrastiveLoss, LinearTeacher, TeacherKind, TeacherSpec};
use otalign::semb::{load_embeddings, verify_sidecar};
use otalign::shift_metrics::{mutual_knn, total_ssw, ShiftReport};
use otalign::synth::{self, SynthConfig};
use otalign::trainer::{train_with_teacher, Aligner, Init, TrainConfig};

use crate::config::{resolve, write_run_config, RunConfig};
use crate::error::CliError;
use crate::Global;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(x) => Err(format!("{x} is not a finite number")),
        Err(e) => Err(e.to_string()),
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = out.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn record<O: Serialize, R: Serialize>(g: &Global, command: &str, options: &O, result: R) -> Result<(), CliError> {
    write_run_config(&g.out, &RunConfig { command, version: VERSION, seed: g.seed, options, result })
}

/// `explicit`, else `data/<name>`, else a usage error naming `flag`.
fn input(explicit: &Option<PathBuf>, data: &Option<PathBuf>, name: &str, flag: &str) -> Result<PathBuf, CliError> {
    explicit
        .clone()
        .or_else(|| data.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| CliError::Usage(format!("missing {flag} (or --data)")))
}

fn load(path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let e = load_embeddings(path).map_err(|e| match e {
        otalign::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Core(other),
    })?;
    verify_sidecar(path)?;
    Ok(e)
}

fn load_paired(px: &Option<PathBuf>, py: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<PairedDataset, CliError> {
    let a = load(&input(px, data, "paired_x.semb", "--paired-x")?)?;
    let b = load(&input(py, data, "paired_y.semb", "--paired-y")?)?;
    Ok(PairedDataset::new(a, b)?)
}

fn load_pool(ux: &Option<PathBuf>, uy: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<UnpairedPool, CliError> {
    Ok(UnpairedPool {
        x: load(&input(ux, data, "unpaired_x.semb", "--unpaired-x")?)?,
        y: load(&input(uy, data, "unpaired_y.semb", "--unpaired-y")?)?,
    })
}

fn preprocess(no_center: bool, no_normalize: bool) -> Preprocess {
    Preprocess { center: !no_center, normalize: !no_normalize }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args, Serialize)]
pub struct SynthFlags {
    /// Dimension of the shared Gaussian latent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_x: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_y: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_pairs: Option<usize>,
    /// Unpaired samples per modality.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_unpaired: Option<usize>,
    /// Held-out pairs (0 skips the test split).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_test: Option<usize>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_std: Option<f64>,
    /// Use identity maps (needs d_x = d_y = latent_dim).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    identity_maps: bool,
    /// Weight of modality-private structure added to the unpaired pool.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pool_shift: Option<f64>,
}

pub fn synth(g: &Global, flags: &SynthFlags) -> Result<(), CliError> {
    let mut cfg: SynthConfig = resolve("synth", &g.file, flags)?;
    cfg.seed = g.seed;
    let data = synth::generate(&cfg)?;
    synth::write_dir(&g.out, &data, &cfg)?;
    record(g, "synth", &cfg, json!({ "files": synth::FILES.iter().map(|f| f.0).collect::<Vec<_>>() }))
}

// ---------------------------------------------------------- fit-teacher

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherOpts {
    kind: String,
    data: Option<PathBuf>,
    paired_x: Option<PathBuf>,
    paired_y: Option<PathBuf>,
    d_prime: Option<usize>,
    lambda: f64,
    no_center: bool,
    no_normalize: bool,
    contrastive_steps: usize,
    contrastive_lr: f64,
    contrastive_loss: String,
    temperature: f64,
}

impl Default for TeacherOpts {
    fn default() -> Self {
        Self {
            kind: "cca".into(),
            data: None,
            paired_x: None,
            paired_y: None,
            d_prime: None,
            lambda: otalign::linear_teachers::DEFAULT_CCA_LAMBDA,
            no_center: false,
            no_normalize: false,
            contrastive_steps: ContrastiveConfig::default().steps,
            contrastive_lr: ContrastiveConfig::default().lr_max,
            contrastive_loss: "siglip".into(),
            temperature: 1.0,
        }
    }
}

impl TeacherOpts {
    fn spec(&self, seed: u64) -> Result<TeacherSpec, CliError> {
        let loss = match self.contrastive_loss.as_str() {
            "siglip" => ContrastiveLoss::Siglip,
            "infonce" => ContrastiveLoss::Infonce { temperature: self.temperature },
            other => return Err(CliError::Usage(format!("unknown contrastive loss '{other}'"))),
        };
        Ok(TeacherSpec {
            kind: self.kind.parse()?,
            d_prime: self.d_prime,
            lambda: self.lambda,
            preprocess: preprocess(self.no_center, self.no_normalize),
            contrastive: ContrastiveConfig {
                steps: self.contrastive_steps,
                lr_max: self.contrastive_lr,
                loss,
                seed,
                ..Default::default()
            },
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitTeacherFlags {
    /// procrustes, cca or contrastive.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    /// Directory laid out like `synth` output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_x: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_y: Option<PathBuf>,
    /// Shared dimension (default min(d_x, d_y); 1024 for contrastive).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_prime: Option<usize>,
    /// CCA eigenvalue regularization.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    no_center: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    no_normalize: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive_steps: Option<usize>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive_lr: Option<f64>,
    /// siglip or infonce.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive_loss: Option<String>,
    /// InfoNCE temperature for the contrastive teacher.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

fn teacher_summary(t: &LinearTeacher, lambda: f64) -> serde_json::Value {
    json!({
        "kind": t.kind,
        "d_prime": t.d_prime(),
        "d_x": t.d_x(),
        "d_y": t.d_y(),
        "lambda": if t.kind == TeacherKind::Cca { Some(lambda) } else { None },
        "singular_values": t.singular_values.as_slice(),
    })
}

pub fn fit_teacher(g: &Global, flags: &FitTeacherFlags) -> Result<(), CliError> {
    let opts: TeacherOpts = resolve("fit-teacher", &g.file, flags)?;
    let spec = opts.spec(g.seed)?;
    let paired = load_paired(&opts.paired_x, &opts.paired_y, &opts.data)?;
    let teacher = teachers::fit_teacher(&paired, &spec)?;
    teacher.write(g.out.join("teacher.smdl"))?;
    record(g, "fit-teacher", &opts, teacher_summary(&teacher, opts.lambda))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    data: Option<PathBuf>,
    paired_x: Option<PathBuf>,
    paired_y: Option<PathBuf>,
    unpaired_x: Option<PathBuf>,
    unpaired_y: Option<PathBuf>,
    teacher: Option<PathBuf>,
    teacher_kind: String,
    d_prime: Option<usize>,
    lambda: f64,
    alpha: f64,
    div: String,
    eps: f64,
    eps_star: f64,
    sinkhorn_iters: usize,
    sinkhorn_tol: f64,
    steps: usize,
    lr: f64,
    weight_decay: f64,
    batch_paired: Option<usize>,
    batch_unpaired: usize,
    d: usize,
    init: String,
    beta1: f64,
    beta2: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            paired_x: None,
            paired_y: None,
            unpaired_x: None,
            unpaired_y: None,
            teacher: None,
            teacher_kind: "cca".into(),
            d_prime: None,
            lambda: otalign::linear_teachers::DEFAULT_CCA_LAMBDA,
            alpha: t.alpha,
            div: t.div.kind.to_string(),
            eps: t.div.eps,
            eps_star: t.div.eps_star,
            sinkhorn_iters: t.div.sinkhorn.max_iter,
            sinkhorn_tol: t.div.sinkhorn.tol,
            steps: t.n_steps,
            lr: t.lr_max,
            weight_decay: t.weight_decay,
            batch_paired: t.batch_paired,
            batch_unpaired: t.batch_unpaired_x,
            d: t.d,
            init: "gaussian".into(),
            beta1: t.lion_beta1,
            beta2: t.lion_beta2,
        }
    }
}

impl TrainOpts {
    fn config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let kind: DivergenceKind = self.div.parse()?;
        let init = match self.init.as_str() {
            "gaussian" => Init::Gaussian,
            "teacher" => Init::Teacher,
            other => return Err(CliError::Usage(format!("unknown init '{other}'"))),
        };
        let cfg = TrainConfig {
            alpha: self.alpha,
            div: DivergenceSpec {
                kind,
                eps: self.eps,
                eps_star: self.eps_star,
                sinkhorn: SinkhornConfig { tol: self.sinkhorn_tol, max_iter: self.sinkhorn_iters },
            },
            n_steps: self.steps,
            lr_max: self.lr,
            weight_decay: self.weight_decay,
            batch_paired: self.batch_paired,
            batch_unpaired_x: self.batch_unpaired,
            batch_unpaired_y: self.batch_unpaired,
            d: self.d,
            seed,
            lion_beta1: self.beta1,
            lion_beta2: self.beta2,
            init,
            siglip_init: SiglipParams::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    /// Directory laid out like `synth` output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_x: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_y: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    unpaired_x: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    unpaired_y: Option<PathBuf>,
    /// Previously fitted teacher; fitted from the paired data when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<PathBuf>,
    /// procrustes or cca (when fitting the teacher here).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher_kind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_prime: Option<usize>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    /// Regularizer weight on the per-row divergence; 0 trains the supervised baseline.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    /// klot, infonce or cka.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    div: Option<String>,
    /// Temperature in the learned space.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    /// Temperature in the teacher space.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_star: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_iters: Option<usize>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    /// Paired rows per step (default: all).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_paired: Option<usize>,
    /// Unpaired rows per modality per step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_unpaired: Option<usize>,
    /// Shared dimension of the alignment layers.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    /// gaussian or teacher.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<String>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
}

pub fn train(g: &Global, flags: &TrainFlags) -> Result<(), CliError> {
    let opts: TrainOpts = resolve("train", &g.file, flags)?;
    let cfg = opts.config(g.seed)?;
    let paired = load_paired(&opts.paired_x, &opts.paired_y, &opts.data)?;
    let pool = load_pool(&opts.unpaired_x, &opts.unpaired_y, &opts.data)?;
    let teacher = match &opts.teacher {
        Some(path) => LinearTeacher::read(path)?,
        None => {
            let spec = TeacherSpec {
                kind: opts.teacher_kind.parse()?,
                d_prime: opts.d_prime,
                lambda: opts.lambda,
                ..Default::default()
            };
            teachers::fit_teacher(&paired, &spec)?
        }
    };
    let report = train_with_teacher(&paired, &pool, teacher, &cfg)?;
    log::info!("{} run finished in {:.2}s", report.label, report.wall_clock_secs);
    report.aligner.write(g.out.join("aligner.smdl"))?;
    report.teacher.write(g.out.join("teacher.smdl"))?;
    write(&g.out, "train.csv", &report.to_csv())?;
    let last = report.final_loss().expect("at least one step");
    record(
        g,
        "train",
        &opts,
        json!({
            "label": report.label,
            "steps": report.steps.len(),
            "final": last,
            "teacher": teacher_summary(&report.teacher, opts.lambda),
        }),
    )
}

// ----------------------------------------------------------------- eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOpts {
    aligner: Option<PathBuf>,
    teacher: Option<PathBuf>,
    data: Option<PathBuf>,
    image: Option<PathBuf>,
    text: Option<PathBuf>,
    gt: Option<PathBuf>,
    ks: Vec<usize>,
    prototypes: Option<PathBuf>,
    labels: Option<PathBuf>,
}

impl Default for EvalOpts {
    fn default() -> Self {
        Self {
            aligner: None,
            teacher: None,
            data: None,
            image: None,
            text: None,
            gt: None,
            ks: otalign::eval::DEFAULT_KS.to_vec(),
            prototypes: None,
            labels: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalFlags {
    /// Trained aligner applied to both sides before scoring.
    #[arg(long, conflicts_with = "teacher")]
    #[serde(skip_serializing_if = "Option::is_none")]
    aligner: Option<PathBuf>,
    /// Linear teacher applied to both sides before scoring.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<PathBuf>,
    /// Directory laid out like `synth` output; its test split is scored.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<PathBuf>,
    /// JSON list: entry i holds the text rows describing image i (default identity).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<PathBuf>,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    ks: Option<Vec<usize>>,
    /// Class prototypes (text side); switches to classification.
    #[arg(long, requires = "labels")]
    #[serde(skip_serializing_if = "Option::is_none")]
    prototypes: Option<PathBuf>,
    /// JSON list of class indices, one per image.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<PathBuf>,
}

enum Mapper {
    Identity,
    Aligner(Aligner),
    Teacher(LinearTeacher),
}

impl Mapper {
    fn x(&self, e: EmbeddingMatrix) -> Result<EmbeddingMatrix, CliError> {
        Ok(match self {
            Self::Identity => e,
            Self::Aligner(a) => a.embed_x(&e)?,
            Self::Teacher(t) => t.embed_x(&e)?,
        })
    }

    fn y(&self, e: EmbeddingMatrix) -> Result<EmbeddingMatrix, CliError> {
        Ok(match self {
            Self::Identity => e,
            Self::Aligner(a) => a.embed_y(&e)?,
            Self::Teacher(t) => t.embed_y(&e)?,
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn eval(g: &Global, flags: &EvalFlags) -> Result<(), CliError> {
    let opts: EvalOpts = resolve("eval", &g.file, flags)?;
    let mapper = match (&opts.aligner, &opts.teacher) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give --aligner or --teacher, not both".into())),
        (Some(p), None) => Mapper::Aligner(Aligner::read(p)?),
        (None, Some(p)) => Mapper::Teacher(LinearTeacher::read(p)?),
        (None, None) => Mapper::Identity,
    };
    let image = mapper.x(load(&input(&opts.image, &opts.data, "test_x.semb", "--image")?)?)?;

    if let Some(proto_path) = &opts.prototypes {
        let labels_path = opts.labels.as_ref().ok_or_else(|| CliError::Usage("--prototypes needs --labels".into()))?;
        let prototypes = mapper.y(load(proto_path)?)?;
        let labels: Vec<usize> = read_json(labels_path)?;
        let accuracy = zero_shot_classify(&image, &prototypes, &labels)?;
        println!("top-1 accuracy {accuracy:.2}");
        write(&g.out, "accuracy.csv", &format!("accuracy\n{accuracy}\n"))?;
        return record(g, "eval", &opts, json!({ "accuracy": accuracy }));
    }

    let text = mapper.y(load(&input(&opts.text, &opts.data, "test_y.semb", "--text")?)?)?;
    let gt = match &opts.gt {
        Some(p) => read_json::<Vec<Vec<usize>>>(p)?,
        None => identity_gt(image.n()),
    };
    let report = retrieval_recall(&image, &text, &gt, &opts.ks)?;
    print!("{}", report.to_table());
    write(&g.out, "recall.csv", &report.to_csv())?;
    record(g, "eval", &opts, &report)
}

// ---------------------------------------------------------------- shift

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftOpts {
    data: Option<PathBuf>,
    paired_x: Option<PathBuf>,
    paired_y: Option<PathBuf>,
    unpaired_x: Option<PathBuf>,
    unpaired_y: Option<PathBuf>,
    n_proj: usize,
    p: f64,
    knn: Option<usize>,
}

impl Default for ShiftOpts {
    fn default() -> Self {
        Self {
            data: None,
            paired_x: None,
            paired_y: None,
            unpaired_x: None,
            unpaired_y: None,
            n_proj: otalign::shift_metrics::DEFAULT_PROJECTIONS,
            p: otalign::shift_metrics::DEFAULT_P,
            knn: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ShiftFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_x: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paired_y: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    unpaired_x: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    unpaired_y: Option<PathBuf>,
    /// Random great circles per distance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_proj: Option<usize>,
    /// Wasserstein order.
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    /// Also report the mutual k-NN score of the paired set with this k.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    knn: Option<usize>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn shift(g: &Global, flags: &ShiftFlags) -> Result<(), CliError> {
    let opts: ShiftOpts = resolve("shift", &g.file, flags)?;
    let paired = load_paired(&opts.paired_x, &opts.paired_y, &opts.data)?;
    let ux = input(&opts.unpaired_x, &opts.data, "unpaired_x.semb", "--unpaired-x")?;
    let uy = input(&opts.unpaired_y, &opts.data, "unpaired_y.semb", "--unpaired-y")?;
    let pool = UnpairedPool { x: load(&ux)?, y: load(&uy)? };
    let report: ShiftReport = total_ssw(&pool, &paired, opts.n_proj, opts.p, g.seed)?;
    let knn = opts.knn.map(|k| mutual_knn(&paired.a, &paired.b, k)).transpose()?;
    println!("ssw_x {:.6}  ssw_y {:.6}  total {:.6}", report.ssw_x, report.ssw_y, report.total);
    if let Some(s) = knn {
        println!("mutual k-NN {s:.4}");
    }
    write(&g.out, "shift.csv", &format!("{}\n{}\n", ShiftReport::CSV_HEADER, report.csv_row(&stem(&ux), &stem(&uy))))?;
    record(g, "shift", &opts, json!({ "shift": report, "mutual_knn": knn }))
}

// ----------------------------------------------------------- bench-grad

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOpts {
    n: usize,
    eps: f64,
    iters: Vec<usize>,
    timing: bool,
}

impl Default for BenchOpts {
    fn default() -> Self {
        Self { n: 1024, eps: 0.05, iters: vec![100, 1000], timing: false }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BenchGradFlags {
    /// Batch size of the affinity matrix.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long, value_parser = finite)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    /// Sinkhorn iteration counts to profile.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    iters: Option<Vec<usize>>,
    /// Add wall-clock columns (makes the CSV run-dependent).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    timing: bool,
}

pub fn bench_grad(g: &Global, flags: &BenchGradFlags) -> Result<(), CliError> {
    let opts: BenchOpts = resolve("bench-grad", &g.file, flags)?;
    let rows = grad_cost_profile(opts.n, opts.eps, &opts.iters, g.seed)?;
    let mut csv = String::new();
    if opts.timing {
        csv.push_str(otalign::entropic_ot::ProfileRow::CSV_HEADER);
        csv.push('\n');
        for r in &rows {
            csv.push_str(&r.csv_line());
            csv.push('\n');
        }
    } else {
        csv.push_str("n,epsilon,iterations,closed_form_floats,unrolled_floats\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{},{}\n", r.n, r.epsilon, r.iterations, r.closed_form_floats, r.unrolled_floats));
        }
    }
    print!("{csv}");
    write(&g.out, "profile.csv", &csv)?;
    record(g, "bench-grad", &opts, json!({ "rows": rows.len() }))
}
