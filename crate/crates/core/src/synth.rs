//! Synthetic two-modality data sharing a Gaussian latent: `X = z P_x + η_x`,
//! `Y = z P_y + η_y`. The unpaired pool can be pushed away from the paired
//! distribution with modality-private latent directions.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMatrix, PairedDataset, UnpairedPool};
use crate::error::{Error, Result};
use crate::linalg::gaussian_matrix;
use crate::rng::{self, Stream};
use crate::semb::{load_embeddings, write_embeddings_with_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub n_pairs: usize,
    pub n_unpaired: usize,
    pub n_test: usize,
    pub noise_std: f64,
    /// Use `P_x = P_y = I`; needs `d_x = d_y = latent_dim`.
    pub identity_maps: bool,
    /// Weight of the modality-private latent in unpaired samples; 0 draws the
    /// pool from the paired distribution.
    pub pool_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            d_x: 48,
            d_y: 32,
            n_pairs: 200,
            n_unpaired: 5000,
            n_test: 500,
            noise_std: 0.3,
            identity_maps: false,
            pool_shift: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.latent_dim, self.d_x, self.d_y, self.n_pairs, self.n_unpaired].contains(&0) {
            return Err(Error::Parameter("latent_dim, d_x, d_y, n_pairs and n_unpaired must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.pool_shift >= 0.0) {
            return Err(Error::Parameter("noise_std and pool_shift must be >= 0".into()));
        }
        if self.identity_maps && !(self.d_x == self.latent_dim && self.d_y == self.latent_dim) {
            return Err(Error::Parameter("identity maps need d_x = d_y = latent_dim".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub paired: PairedDataset,
    pub pool: UnpairedPool,
    /// Held-out pairs for evaluation; `None` when `n_test = 0`.
    pub test: Option<PairedDataset>,
}

struct Maps {
    p_x: DMatrix<f64>,
    p_y: DMatrix<f64>,
    q_x: DMatrix<f64>,
    q_y: DMatrix<f64>,
}

fn maps(cfg: &SynthConfig) -> Maps {
    let mut rng = rng::stream(cfg.seed, Stream::SynthMaps);
    let std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let (p_x, p_y) = if cfg.identity_maps {
        (DMatrix::identity(cfg.latent_dim, cfg.d_x), DMatrix::identity(cfg.latent_dim, cfg.d_y))
    } else {
        (
            gaussian_matrix(&mut rng, cfg.latent_dim, cfg.d_x, std),
            gaussian_matrix(&mut rng, cfg.latent_dim, cfg.d_y, std),
        )
    };
    let q_x = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.d_x, std);
    let q_y = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.d_y, std);
    Maps { p_x, p_y, q_x, q_y }
}

fn observe(rng: &mut rng::Rng, z: &DMatrix<f64>, p: &DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    let clean = z * p;
    if noise > 0.0 {
        clean + gaussian_matrix(rng, z.nrows(), p.ncols(), noise)
    } else {
        clean
    }
}

fn pairs(rng: &mut rng::Rng, n: usize, cfg: &SynthConfig, m: &Maps) -> Result<PairedDataset> {
    let z = gaussian_matrix(rng, n, cfg.latent_dim, 1.0);
    let x = observe(rng, &z, &m.p_x, cfg.noise_std);
    let y = observe(rng, &z, &m.p_y, cfg.noise_std);
    PairedDataset::new(EmbeddingMatrix::new(x)?, EmbeddingMatrix::new(y)?)
}

fn unpaired_side(rng: &mut rng::Rng, cfg: &SynthConfig, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<EmbeddingMatrix> {
    let z = gaussian_matrix(rng, cfg.n_unpaired, cfg.latent_dim, 1.0);
    let mut x = observe(rng, &z, p, cfg.noise_std);
    if cfg.pool_shift > 0.0 {
        let private = gaussian_matrix(rng, cfg.n_unpaired, cfg.latent_dim, 1.0);
        x += private * q * cfg.pool_shift;
    }
    EmbeddingMatrix::new(x)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let m = maps(cfg);
    let paired = pairs(&mut rng::stream(cfg.seed, Stream::SynthPaired), cfg.n_pairs, cfg, &m)?;
    let pool = UnpairedPool {
        x: unpaired_side(&mut rng::stream(cfg.seed, Stream::SynthUnpairedX), cfg, &m.p_x, &m.q_x)?,
        y: unpaired_side(&mut rng::stream(cfg.seed, Stream::SynthUnpairedY), cfg, &m.p_y, &m.q_y)?,
    };
    let test = if cfg.n_test > 0 {
        Some(pairs(&mut rng::stream(cfg.seed, Stream::SynthTest), cfg.n_test, cfg, &m)?)
    } else {
        None
    };
    Ok(SynthData { paired, pool, test })
}

/// File names used by [`write_dir`] and [`read_dir`].
pub const FILES: [(&str, &str); 6] = [
    ("paired_x.semb", "image"),
    ("paired_y.semb", "text"),
    ("unpaired_x.semb", "image"),
    ("unpaired_y.semb", "text"),
    ("test_x.semb", "image"),
    ("test_y.semb", "text"),
];

/// Writes every split with sidecar manifests, plus `synth.json` holding `cfg`.
pub fn write_dir(dir: impl AsRef<Path>, data: &SynthData, cfg: &SynthConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut mats = vec![&data.paired.a, &data.paired.b, &data.pool.x, &data.pool.y];
    if let Some(t) = &data.test {
        mats.push(&t.a);
        mats.push(&t.b);
    }
    for ((name, modality), m) in FILES.iter().zip(mats) {
        write_embeddings_with_manifest(dir.join(name), m, &format!("synth:{}", cfg.seed), modality)?;
    }
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join("synth.json"), json + "\n")?;
    Ok(())
}

pub fn read_dir(dir: impl AsRef<Path>) -> Result<SynthData> {
    let dir = dir.as_ref();
    let load = |name: &str| load_embeddings(dir.join(name));
    let test = if dir.join("test_x.semb").exists() {
        Some(PairedDataset::new(load("test_x.semb")?, load("test_y.semb")?)?)
    } else {
        None
    };
    Ok(SynthData {
        paired: PairedDataset::new(load("paired_x.semb")?, load("paired_y.semb")?)?,
        pool: UnpairedPool { x: load("unpaired_x.semb")?, y: load("unpaired_y.semb")? },
        test,
    })
}
