//! Zero-shot evaluation on embeddings in the shared space: cross-modal
//! retrieval recall and prototype classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine_affinity_mat, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Recall percentages per cutoff `K` in both retrieval directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub t2i_at: BTreeMap<usize, f64>,
    pub i2t_at: BTreeMap<usize, f64>,
    pub mean_r1: f64,
}

impl RecallReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,k,recall\n");
        for (dir, map) in [("t2i", &self.t2i_at), ("i2t", &self.i2t_at)] {
            for (k, r) in map {
                let _ = writeln!(out, "{dir},{k},{r}");
            }
        }
        let _ = writeln!(out, "mean,1,{}", self.mean_r1);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("  K     T2I      I2T\n");
        for (k, t2i) in &self.t2i_at {
            let _ = writeln!(out, "{k:>3} {t2i:>7.2}  {:>7.2}", self.i2t_at[k]);
        }
        let _ = writeln!(out, "MeanR@1 {:.2}", self.mean_r1);
        out
    }
}

/// 0-based rank of the best valid target for one query row of `sim`,
/// counting ties against higher-index targets only.
fn best_rank(sim: &[f64], valid: &[usize]) -> usize {
    valid
        .iter()
        .map(|&t| {
            let s = sim[t];
            sim.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < t)).count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

fn recall_at(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Cosine-ranked retrieval in both directions.
///
/// `gt[i]` lists the text rows that describe image `i`. An image query hits
/// when any of its texts is in the top `K`; each text query's valid targets
/// are the images listing it.
pub fn retrieval_recall(
    z_img: &EmbeddingMatrix,
    z_txt: &EmbeddingMatrix,
    gt: &[Vec<usize>],
    ks: &[usize],
) -> Result<RecallReport> {
    if gt.len() != z_img.n() {
        return Err(Error::DimensionMismatch(format!("{} gt entries for {} images", gt.len(), z_img.n())));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Parameter("recall cutoffs must be >= 1".into()));
    }
    let mut txt_to_img = vec![Vec::new(); z_txt.n()];
    for (i, texts) in gt.iter().enumerate() {
        if texts.is_empty() {
            return Err(Error::Data(format!("image {i} has no ground-truth text")));
        }
        for &t in texts {
            let slot = txt_to_img
                .get_mut(t)
                .ok_or_else(|| Error::Data(format!("image {i} references text {t} of {}", z_txt.n())))?;
            slot.push(i);
        }
    }
    if let Some(t) = txt_to_img.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("text {t} has no ground-truth image")));
    }

    let sim: DMatrix<f64> = cosine_affinity_mat(z_img.matrix(), z_txt.matrix())?;
    let sim_t = sim.transpose();
    // Columns of the transposes are contiguous query rows.
    let i2t: Vec<usize> = (0..z_img.n()).map(|i| best_rank(sim_t.column(i).as_slice(), &gt[i])).collect();
    let t2i: Vec<usize> = (0..z_txt.n()).map(|t| best_rank(sim.column(t).as_slice(), &txt_to_img[t])).collect();

    let mut cutoffs: Vec<usize> = ks.to_vec();
    cutoffs.push(1);
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let t2i_at: BTreeMap<usize, f64> = cutoffs.iter().map(|&k| (k, recall_at(&t2i, k))).collect();
    let i2t_at: BTreeMap<usize, f64> = cutoffs.iter().map(|&k| (k, recall_at(&i2t, k))).collect();
    let mean_r1 = (t2i_at[&1] + i2t_at[&1]) / 2.0;
    Ok(RecallReport { t2i_at, i2t_at, mean_r1 })
}

/// Identity ground truth: image `i` is described by text `i`.
pub fn identity_gt(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

/// Top-1 accuracy (percent) of nearest-prototype classification by cosine,
/// ties to the lower class index.
pub fn zero_shot_classify(z_img: &EmbeddingMatrix, prototypes: &EmbeddingMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != z_img.n() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} images", labels.len(), z_img.n())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prototypes.n()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", prototypes.n())));
    }
    let sim = cosine_affinity_mat(z_img.matrix(), prototypes.matrix())?;
    let correct = (0..z_img.n())
        .filter(|&i| {
            let row = sim.row(i);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == labels[i]
        })
        .count();
    Ok(100.0 * correct as f64 / z_img.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, random_orthogonal};
    use crate::rng::stream_at;
    use crate::shift_metrics::mean_and_se;
    use proptest::prelude::*;

    fn emb(m: DMatrix<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(m).unwrap()
    }

    #[test]
    fn perfect_alignment() {
        let z = emb(gaussian_matrix(&mut stream_at(1, 0), 20, 6, 1.0));
        let r = retrieval_recall(&z, &z, &identity_gt(20), &DEFAULT_KS).unwrap();
        assert_eq!(r.t2i_at[&1], 100.0);
        assert_eq!(r.i2t_at[&1], 100.0);
        assert_eq!(r.mean_r1, 100.0);
    }

    #[test]
    fn dominant_diagonal() {
        // Rows chosen so that the cosine matrix has a dominant diagonal.
        let img = emb(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let txt = emb(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]));
        let r = retrieval_recall(&img, &txt, &identity_gt(2), &[1]).unwrap();
        assert_eq!(r.mean_r1, 100.0);
    }

    #[test]
    fn chance_level_with_four_images() {
        let runs: Vec<f64> = (0..200)
            .map(|t| {
                let mut rng = stream_at(2, t);
                let img = emb(gaussian_matrix(&mut rng, 4, 16, 1.0));
                let txt = emb(gaussian_matrix(&mut rng, 4, 16, 1.0));
                retrieval_recall(&img, &txt, &identity_gt(4), &[1]).unwrap().mean_r1
            })
            .collect();
        let (mean, se) = mean_and_se(&runs);
        assert!((mean - 25.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn multi_caption_and_ties() {
        // Image 0 owns texts 0 and 2; all texts identical so ranks fall back to index order.
        let img = emb(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let txt = emb(DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let gt = vec![vec![0, 2], vec![1]];
        let r = retrieval_recall(&img, &txt, &gt, &[1, 2]).unwrap();
        assert_eq!(r.i2t_at[&1], 50.0);
        assert_eq!(r.i2t_at[&2], 100.0);
        // Both images tie for every text: image 0 wins, so texts 0 and 2 hit.
        assert!((r.t2i_at[&1] - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.mean_r1, (r.t2i_at[&1] + r.i2t_at[&1]) / 2.0);
    }

    #[test]
    fn gt_errors() {
        let z = emb(DMatrix::identity(2, 2));
        assert!(matches!(retrieval_recall(&z, &z, &[vec![0], vec![]], &[1]), Err(Error::Data(_))));
        assert!(matches!(retrieval_recall(&z, &z, &[vec![0], vec![0]], &[1]), Err(Error::Data(_))));
        assert!(matches!(retrieval_recall(&z, &z, &[vec![0], vec![5]], &[1]), Err(Error::Data(_))));
    }

    #[test]
    fn classify_examples() {
        let protos = emb(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]));
        let labels = [2, 0, 1, 1];
        let imgs = protos.select_rows(&labels);
        assert_eq!(zero_shot_classify(&imgs, &protos, &labels).unwrap(), 100.0);

        let same = emb(DMatrix::from_element(3, 2, 1.0));
        assert_eq!(zero_shot_classify(&imgs, &same, &labels).unwrap(), 25.0);
        assert!(zero_shot_classify(&imgs, &protos, &[0, 1, 3, 0]).is_err());
    }

    #[test]
    fn classify_separated_blobs() {
        let mut rng = stream_at(3, 0);
        let (n, d) = (200, 8);
        let mut m = gaussian_matrix(&mut rng, 2 * n, d, 1.0);
        let labels: Vec<usize> = (0..2 * n).map(|i| i / n).collect();
        for i in 0..2 * n {
            m[(i, 0)] += if labels[i] == 0 { 2.0 } else { -2.0 };
            m[(i, 1)] += 3.0;
        }
        let protos = emb(DMatrix::from_row_slice(2, d, &{
            let mut v = vec![0.0; 2 * d];
            v[0] = 2.0;
            v[1] = 3.0;
            v[d] = -2.0;
            v[d + 1] = 3.0;
            v
        }));
        assert!(zero_shot_classify(&emb(m), &protos, &labels).unwrap() >= 95.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn recall_properties(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = stream_at(seed, 1);
            let img = emb(gaussian_matrix(&mut rng, n, 4, 1.0));
            let txt = emb(gaussian_matrix(&mut rng, n, 4, 1.0));
            let ks: Vec<usize> = (1..=n).collect();
            let r = retrieval_recall(&img, &txt, &identity_gt(n), &ks).unwrap();
            for map in [&r.t2i_at, &r.i2t_at] {
                let v: Vec<f64> = map.values().copied().collect();
                prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(v.iter().all(|x| (0.0..=100.0).contains(x)));
                prop_assert_eq!(map[&n], 100.0);
            }
            let rot = random_orthogonal(&mut rng, 4);
            let r2 = retrieval_recall(&emb(img.matrix() * &rot), &emb(txt.matrix() * &rot), &identity_gt(n), &ks).unwrap();
            prop_assert_eq!(r, r2);
        }
    }
}
