//! Probes for trained checkpoints: similarity curves, position retrieval,
//! PCA feature export, and k-means labels.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_augmentations, AugmentationConfig};
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};
use crate::nn::{
    encode_points, encoder_input, l2_normalize_rows, mlp_forward, online_embed, project_head, target_embed,
    Checkpoint, HeadKind, ModelConfig, ParameterSet, EMBEDDING_NAME, HEAD_LAYERS,
};
use crate::par;
use crate::pcd::{knn_indices, PointCloud};
use crate::targets::{nearest_cell, sample_grid, TargetGrid, TargetProvider};
use crate::train::{stream_rng, PreparedScene, TrainConfig};

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub provider: TargetProvider,
    pub params: ParameterSet<f32>,
}

impl EvalModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_checkpoint(ckpt)?;
        Self::new(cfg, ckpt.params.clone())
    }

    pub fn new(cfg: TrainConfig, params: ParameterSet<f32>) -> Result<Self> {
        let model = cfg.model_config();
        let provider = cfg.provider()?;
        let expected = crate::nn::init_params::<f32>(
            &model,
            0,
            provider
                .constant_grid()
                .filter(|_| model.learnable_cells > 0)
                .map(|g| g.as_matrix().to_owned())
                .as_ref(),
        )?;
        if !expected.same_layout(&params) {
            return Err(Error::invalid(
                "checkpoint parameters do not match its recorded config",
            ));
        }
        Ok(EvalModel {
            cfg,
            model,
            provider,
            params,
        })
    }

    /// Unit-norm online head outputs for every point of `cloud`.
    pub fn online_features(&self, cloud: &PointCloud) -> Result<Array2<f32>> {
        let nb = knn_indices(cloud, self.model.encoder.k.min(cloud.len()))?;
        let x = encoder_input(cloud.positions(), cloud.colors(), &nb, &self.model.encoder)?;
        online_embed(x, &self.params, &self.model)
    }

    /// Encoder features (before the head).
    pub fn encoder_features(&self, cloud: &PointCloud) -> Result<Array2<f32>> {
        let nb = knn_indices(cloud, self.model.encoder.k.min(cloud.len()))?;
        encode_points(cloud, &nb, &self.params, &self.model)
    }

    /// Raw cell vectors: the trained embedding for trainable targets,
    /// otherwise the provider's fixed grid.
    pub fn cell_vectors(&self) -> Result<Array2<f32>> {
        if let Some(e) = self.params.get(EMBEDDING_NAME) {
            return Ok(e.clone());
        }
        let g = self
            .provider
            .constant_grid()
            .ok_or_else(|| Error::invalid("retrieval needs a fixed or trainable target grid"))?;
        Ok(g.as_matrix().mapv(|v| v as f32))
    }

    fn grid(&self) -> Result<TargetGrid> {
        let m = self.cell_vectors()?;
        let (gx, gy) = self.provider.grid_size();
        TargetGrid::new(gx, gy, m.ncols(), m.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityRow {
    pub epoch: usize,
    pub pos_sim: f64,
    pub neg_sim: f64,
}

/// Mean cosine over rows of `a` and `b` sharing a source id (positive) and
/// over all other cross pairs (negative). Rows must be unit-norm.
pub fn matched_similarities(
    a: ArrayView2<f32>,
    a_ids: &[u64],
    b: ArrayView2<f32>,
    b_ids: &[u64],
) -> (f64, f64, usize) {
    let mut by_id: HashMap<u64, Vec<usize>> = HashMap::new();
    for (j, &id) in b_ids.iter().enumerate() {
        by_id.entry(id).or_default().push(j);
    }
    let mut pos = 0.0;
    let mut pairs = 0usize;
    for (i, id) in a_ids.iter().enumerate() {
        if let Some(js) = by_id.get(id) {
            for &j in js {
                pos += a.row(i).dot(&b.row(j)) as f64;
                pairs += 1;
            }
        }
    }
    let sa = a.map(|&v| v as f64).sum_axis(Axis(0));
    let sb = b.map(|&v| v as f64).sum_axis(Axis(0));
    let all = sa.dot(&sb);
    let others = a.nrows() * b.nrows() - pairs;
    let pos_mean = if pairs > 0 { pos / pairs as f64 } else { 0.0 };
    let neg_mean = if others > 0 {
        (all - pos) / others as f64
    } else {
        0.0
    };
    (pos_mean, neg_mean, pairs)
}

/// Positive/negative similarity of two augmented views of each probe scene,
/// for every checkpoint. Views depend only on `seed`, so every checkpoint
/// sees the same inputs.
pub fn similarity_curves(
    checkpoints: &[(usize, Checkpoint)],
    scenes: &[PreparedScene],
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<SimilarityRow>> {
    if scenes.is_empty() {
        return Err(Error::invalid("similarity curves need at least one probe scene"));
    }
    let views: Vec<_> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, i as u64, 0);
            let a = apply_augmentations(&s.cloud, aug, &mut rng)?;
            let b = apply_augmentations(&s.cloud, aug, &mut rng)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (epoch, ckpt) in checkpoints {
        let m = EvalModel::from_checkpoint(ckpt)?;
        let per_scene = par::map_slice(&views, |(a, b)| -> Result<(f64, f64)> {
            let qa = m.online_features(&a.cloud)?;
            let qb = m.online_features(&b.cloud)?;
            let (p, n, _) = matched_similarities(qa.view(), &a.kept, qb.view(), &b.kept);
            Ok((p, n))
        });
        let (mut p, mut n) = (0.0, 0.0);
        for r in per_scene {
            let (a, b) = r?;
            p += a;
            n += b;
        }
        let k = views.len() as f64;
        rows.push(SimilarityRow {
            epoch: *epoch,
            pos_sim: p / k,
            neg_sim: n / k,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Online head features of the augmented view.
    Online,
    /// The sampled target vectors themselves, matched against the raw cell
    /// vectors by cosine (upper bound set by bilinear sampling).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub points: usize,
    pub chance: f64,
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: ndarray::ArrayView1<f32>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 grid-cell retrieval: each point's feature is compared with the
/// head-projected cell vectors (raw cell vectors in oracle mode) and the
/// best cell is checked against the nearest cell of its source pixel.
pub fn position_retrieval_probe(
    model: &EvalModel,
    scenes: &[PreparedScene],
    aug: &AugmentationConfig,
    seed: u64,
    mode: ProbeMode,
) -> Result<RetrievalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("retrieval probe needs at least one scene"));
    }
    let grid = model.grid()?;
    let cells = match mode {
        ProbeMode::Online => target_embed(model.cell_vectors()?.view(), &model.params, &model.model)?,
        ProbeMode::Oracle => l2_normalize_rows(model.cell_vectors()?.view()).y,
    };
    let (gx, gy) = (grid.grid_x(), grid.grid_y());
    let per_scene = par::map_range(scenes.len(), |i| -> Result<(usize, usize)> {
        let mut rng = stream_rng(seed, i as u64, 1);
        let view = apply_augmentations(&scenes[i].cloud, aug, &mut rng)?;
        let size = view.cloud.source_size();
        let feats = match mode {
            ProbeMode::Online => model.online_features(&view.cloud)?,
            ProbeMode::Oracle => {
                let n = view.len();
                let mut t = Array2::zeros((n, grid.dim()));
                for (r, &uv) in view.cloud.src_uv().iter().enumerate() {
                    for (o, v) in t.row_mut(r).iter_mut().zip(sample_grid(&grid, uv, size)) {
                        *o = v as f32;
                    }
                }
                l2_normalize_rows(t.view()).y
            }
        };
        let scores = feats.dot(&cells.t());
        let hits = view
            .cloud
            .src_uv()
            .iter()
            .enumerate()
            .filter(|&(r, &uv)| argmax(scores.row(r)) == nearest_cell(uv, size, gx, gy))
            .count();
        Ok((hits, view.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in per_scene {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / total.max(1) as f64,
        points: total,
        chance: 1.0 / (gx * gy) as f64,
    })
}

/// Head outputs for arbitrary features — exposed for tooling.
pub fn head_features(model: &EvalModel, features: ArrayView2<f32>, which: HeadKind) -> Result<Array2<f32>> {
    project_head(features, &model.params, &model.model, which)
}

/// Raw (pre-normalization) target head outputs of the cell vectors.
pub fn projected_cells(model: &EvalModel) -> Result<Array2<f32>> {
    let cells = model.cell_vectors()?;
    let (h, _) = mlp_forward(
        &model.params,
        model.model.target_head_prefix(),
        HEAD_LAYERS,
        cells,
        false,
    )?;
    Ok(l2_normalize_rows(h.view()).y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `N × 3` scores scaled to `[0, 1]` per column.
    pub table: FeatureTable,
    /// Fraction of total variance carried by each of the three components.
    pub explained: [f64; 3],
    /// `D × 3` unit loading vectors.
    pub components: Array2<f64>,
}

/// Projects mean-centered features onto the top three principal directions.
/// Each component's largest-magnitude loading is made positive and each
/// score column is min-max scaled to `[0, 1]` (constant columns map to 0).
pub fn pca_feature_export(features: ArrayView2<f64>) -> Result<PcaResult> {
    let (n, d) = features.dim();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::invalid("PCA needs at least one feature column"));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 3");
    let centered = &features - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Array2::zeros((d, 3));
    let mut explained = [0.0; 3];
    for (c, &k) in order.iter().take(3).enumerate() {
        let v = eig.eigenvectors.column(k);
        let big = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("d >= 1");
        let sign = if v[big] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            components[[r, c]] = sign * v[r];
        }
        explained[c] = if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        };
    }
    let mut scores = centered.dot(&components);
    for mut col in scores.columns_mut() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        col.mapv_inplace(|v| {
            if span > 1e-12 * hi.abs().max(1.0) {
                (v - lo) / span
            } else {
                0.0
            }
        });
    }
    let table = FeatureTable::new(
        vec!["pc1".into(), "pc2".into(), "pc3".into()],
        scores.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(PcaResult {
        table,
        explained,
        components,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Inertia after every assignment pass.
    pub inertia: Vec<f64>,
}

pub const KMEANS_MAX_ITERS: usize = 50;

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from a seeded farthest-point initialization, capped at
/// [`KMEANS_MAX_ITERS`] iterations.
pub fn kmeans_labels(features: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(centers[0])))
        .collect();
    while centers.len() < k {
        let mut far = 0;
        for i in 0..n {
            if nearest[i] > nearest[far] {
                far = i;
            }
        }
        centers.push(far);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(features.row(i), features.row(far)));
        }
    }
    let mut centroids = features.select(Axis(0), &centers);
    let mut labels = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let assign = par::map_range(n, |i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(features.row(i), centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        });
        let changed = assign.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        labels = assign.iter().map(|a| a.0).collect();
        inertia.push(assign.iter().map(|a| a.1).sum());
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &features.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let s = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&s);
            }
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        inertia,
    })
}
