//! Batch construction and the pretraining loop.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, step,
//! slot)`, and per-scene gradients are reduced in slot order, so a run is
//! fully determined by its seed, config, and data — whatever the worker
//! count — and can be resumed from any checkpoint.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{paired_views, AugmentationConfig, AugmentedView};
use crate::camera::{backproject, inverse_depth_to_metric, CameraIntrinsics, WorldTransform};
use crate::dataio::{load_entry, parse_records, ManifestEntry};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, Objective, DEFAULT_TEMPERATURE};
use crate::nn::{
    cosine_lr, encoder_input, init_params, load_checkpoint, save_checkpoint, scene_loss, sgd_momentum_step,
    Checkpoint, EncoderConfig, GradientSet, ModelConfig, OptimizerState, ParameterSet, SceneInputs,
};
use crate::par;
use crate::pcd::{grid_sample, knn_indices, view_mixup, NeighborTable, PointCloud, DEFAULT_GRID_CELL};
use crate::raster::{ColorImage, DepthKind, DepthMap};
use crate::targets::{
    bilinear_weights, grid_coords, nearest_cell, sample_grid, TargetGrid, TargetProvider, TargetVariant,
    DEFAULT_GRID,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_scenes: usize,
    pub points_per_view: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub tau: f64,
    pub objective: Objective,
    pub target: TargetVariant,
    pub mixup: f64,
    pub grid: usize,
    pub d_model: usize,
    pub augmentation: AugmentationConfig,
    pub color_loss_weight: f64,
    pub encoder: EncoderConfig,
    pub share_target_head: bool,
    /// Worker threads; 0 uses the library default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            steps: None,
            batch_scenes: 8,
            points_per_view: 2048,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 0,
            tau: DEFAULT_TEMPERATURE,
            objective: Objective::InfoNce,
            target: TargetVariant::Pe2d,
            mixup: 0.5,
            grid: DEFAULT_GRID,
            d_model: 64,
            augmentation: AugmentationConfig::default(),
            color_loss_weight: 0.0,
            encoder: EncoderConfig::default(),
            share_target_head: false,
            threads: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value {value:?} for {key}"),
    })
}

fn parse_range(key: &str, value: &str, line: usize) -> Result<[f64; 2]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::Parse {
            line,
            message: format!("{key} expects `lo,hi`, found {value:?}"),
        });
    }
    Ok([
        parse_value(key, parts[0], line)?,
        parse_value(key, parts[1], line)?,
    ])
}

fn fmt_range(r: [f64; 2]) -> String {
    format!("{},{}", r[0], r[1])
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_scenes == 0 || self.points_per_view < 2 || self.epochs == 0 {
            return Err(Error::invalid(
                "epochs and batch size must be positive and points per view at least 2",
            ));
        }
        if self.steps == Some(0) {
            return Err(Error::invalid("steps must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0, 1) and weight decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mixup) {
            return Err(Error::invalid("mixup probability must be in [0, 1]"));
        }
        if self.grid < 2 || self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::invalid(
                "grid must be >= 2 and d_model a positive multiple of 4",
            ));
        }
        if self.objective == Objective::PositionClassification
            && matches!(self.target, TargetVariant::ConvColor | TargetVariant::ConvDepth)
        {
            return Err(Error::invalid(
                "position classification needs a fixed or trainable grid, not conv targets",
            ));
        }
        if self.encoder.k > self.points_per_view {
            return Err(Error::invalid("neighborhood size exceeds points per view"));
        }
        self.loss_config().validate()?;
        self.augmentation().validate()?;
        self.model_config().validate()
    }

    /// Augmentation with the sample count pinned to `points_per_view`.
    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            sample_count: Some(self.points_per_view),
            ..self.augmentation.clone()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            objective: self.objective,
            color_loss_weight: self.color_loss_weight,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            target_dim: self.d_model,
            share_target_head: self.share_target_head,
            color_head: self.color_loss_weight > 0.0,
            learnable_cells: if self.target == TargetVariant::Learnable {
                self.grid * self.grid
            } else {
                0
            },
        }
    }

    pub fn provider(&self) -> Result<TargetProvider> {
        TargetProvider::new(self.target, self.grid, self.d_model, self.seed)
    }

    /// Ordered `key=value` pairs; [`TrainConfig::from_pairs`] inverts this.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = &self.augmentation;
        let e = &self.encoder;
        let mut v: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
        ];
        if let Some(s) = self.steps {
            v.push(("steps", s.to_string()));
        }
        v.extend([
            ("batch_scenes", self.batch_scenes.to_string()),
            ("points_per_view", self.points_per_view.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("tau", self.tau.to_string()),
            ("objective", self.objective.as_str().to_owned()),
            ("target", self.target.as_str().to_owned()),
            ("mixup", self.mixup.to_string()),
            ("grid", self.grid.to_string()),
            ("d_model", self.d_model.to_string()),
            ("color_loss_weight", self.color_loss_weight.to_string()),
            ("use_color", e.use_color.to_string()),
            ("canonical_yaw", e.canonical_yaw.to_string()),
            ("knn", e.k.to_string()),
            (
                "hidden",
                e.hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("feature_dim", e.feature_dim.to_string()),
            ("projection_dim", e.projection_dim.to_string()),
            ("share_target_head", self.share_target_head.to_string()),
            ("aug.scale", fmt_range(a.scale)),
            ("aug.yaw", fmt_range(a.yaw)),
            ("aug.tilt", fmt_range(a.tilt)),
            ("aug.translation", fmt_range(a.translation)),
            ("aug.crop_keep", fmt_range(a.crop_keep)),
            ("aug.drop_ratio", a.drop_ratio.to_string()),
            ("aug.color_jitter", a.color_jitter.to_string()),
            ("aug.mask_ratio", a.mask_ratio.to_string()),
            ("aug.mask_block_voxels", a.mask_block_voxels.to_string()),
        ]);
        v.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
    }

    /// Applies `(key, value, line)` overrides onto the defaults. Unknown keys
    /// are logged and ignored.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, usize)>,
    {
        let mut c = TrainConfig::default();
        for (key, value, line) in pairs {
            let a = &mut c.augmentation;
            match key {
                "seed" => c.seed = parse_value(key, value, line)?,
                "epochs" => c.epochs = parse_value(key, value, line)?,
                "steps" => c.steps = Some(parse_value(key, value, line)?),
                "batch_scenes" => c.batch_scenes = parse_value(key, value, line)?,
                "points_per_view" => c.points_per_view = parse_value(key, value, line)?,
                "lr" => c.lr = parse_value(key, value, line)?,
                "momentum" => c.momentum = parse_value(key, value, line)?,
                "weight_decay" => c.weight_decay = parse_value(key, value, line)?,
                "warmup_steps" => c.warmup_steps = parse_value(key, value, line)?,
                "tau" => c.tau = parse_value(key, value, line)?,
                "objective" => c.objective = parse_value(key, value, line)?,
                "target" => c.target = parse_value(key, value, line)?,
                "mixup" => c.mixup = parse_value(key, value, line)?,
                "grid" => c.grid = parse_value(key, value, line)?,
                "d_model" => c.d_model = parse_value(key, value, line)?,
                "color_loss_weight" => c.color_loss_weight = parse_value(key, value, line)?,
                "use_color" => c.encoder.use_color = parse_value(key, value, line)?,
                "canonical_yaw" => c.encoder.canonical_yaw = parse_value(key, value, line)?,
                "knn" => c.encoder.k = parse_value(key, value, line)?,
                "hidden" => {
                    c.encoder.hidden = value
                        .split(',')
                        .map(|h| parse_value(key, h.trim(), line))
                        .collect::<Result<_>>()?
                }
                "feature_dim" => c.encoder.feature_dim = parse_value(key, value, line)?,
                "projection_dim" => c.encoder.projection_dim = parse_value(key, value, line)?,
                "share_target_head" => c.share_target_head = parse_value(key, value, line)?,
                "threads" => c.threads = parse_value(key, value, line)?,
                "aug.scale" => a.scale = parse_range(key, value, line)?,
                "aug.yaw" => a.yaw = parse_range(key, value, line)?,
                "aug.tilt" => a.tilt = parse_range(key, value, line)?,
                "aug.translation" => a.translation = parse_range(key, value, line)?,
                "aug.crop_keep" => a.crop_keep = parse_range(key, value, line)?,
                "aug.drop_ratio" => a.drop_ratio = parse_value(key, value, line)?,
                "aug.color_jitter" => a.color_jitter = parse_value(key, value, line)?,
                "aug.mask_ratio" => a.mask_ratio = parse_value(key, value, line)?,
                "aug.mask_block_voxels" => a.mask_block_voxels = parse_value(key, value, line)?,
                other => log::warn!("line {line}: ignoring unknown config key {other:?}"),
            }
        }
        Ok(c)
    }

    /// Parses a `key = value` config file (`#` comments allowed).
    pub fn parse(text: &str) -> Result<Self> {
        let records = parse_records(text)?;
        let mut seen = std::collections::HashSet::new();
        for kv in records.iter().flatten() {
            if !seen.insert(kv.key.as_str()) {
                return Err(Error::Parse {
                    line: kv.line,
                    message: format!("duplicate key {:?}", kv.key),
                });
            }
        }
        let cfg = Self::from_pairs(
            records
                .iter()
                .flatten()
                .map(|kv| (kv.key.as_str(), kv.value.as_str(), kv.line)),
        )?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Rebuilds the config stored in a checkpoint's metadata.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let known = TrainConfig::default().to_pairs();
        let pairs = ckpt
            .meta
            .iter()
            .filter(|(k, _)| k == "steps" || known.iter().any(|(n, _)| n == k))
            .map(|(k, v)| (k.as_str(), v.as_str(), 0));
        Self::from_pairs(pairs)
    }
}

/// A scene lifted once and reused every step.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub name: String,
    /// Grid-sampled world-frame cloud.
    pub cloud: PointCloud,
    pub depth: DepthMap,
    pub color: Option<ColorImage>,
    /// Per-frame target grid for conv providers.
    pub grid: Option<TargetGrid>,
}

/// Load → metric depth → back-project → 2 cm grid sample.
pub fn prepare_scene(entry: &ManifestEntry, provider: &TargetProvider) -> Result<PreparedScene> {
    let (depth, color) = load_entry(entry)?;
    let k = CameraIntrinsics::for_size(depth.width(), depth.height())?;
    let depth = match depth.kind() {
        DepthKind::Metric => depth,
        DepthKind::Inverse => inverse_depth_to_metric(&depth, &k)?,
    };
    let cloud = backproject(&depth, &k, &WorldTransform::axis_exchange(), color.as_ref())?;
    let cloud = grid_sample(&cloud, DEFAULT_GRID_CELL)?;
    if cloud.len() < 2 {
        return Err(Error::invalid(format!(
            "{} has fewer than two valid points",
            entry.depth_path.display()
        )));
    }
    let grid = if provider.is_constant() {
        None
    } else {
        Some(provider.grid_for(&depth, color.as_ref())?.into_owned())
    };
    Ok(PreparedScene {
        name: entry.depth_path.display().to_string(),
        cloud,
        depth,
        color,
        grid,
    })
}

/// Prepares every entry, skipping (with a warning) those that fail.
pub fn prepare_scenes(entries: &[ManifestEntry], provider: &TargetProvider) -> Result<Vec<PreparedScene>> {
    let prepared = par::map_slice(entries, |e| prepare_scene(e, provider));
    let mut out = Vec::with_capacity(entries.len());
    for (entry, p) in entries.iter().zip(prepared) {
        match p {
            Ok(s) => out.push(s),
            Err(err) => log::warn!("skipping {}: {err}", entry.depth_path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no usable scenes in the manifest"));
    }
    Ok(out)
}

/// Deterministic stream for `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

/// Seed recorded with a failing batch so it can be replayed.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One scene of a training batch.
#[derive(Debug, Clone)]
pub struct BatchScene {
    pub scene: usize,
    pub partner: Option<usize>,
    pub view: AugmentedView,
    pub neighbors: NeighborTable,
    /// `N × d_model` target vectors (the initial grid for trainable targets).
    pub targets: Array2<f64>,
    /// Nearest grid cell of every point.
    pub labels: Vec<usize>,
    /// Four `(cell, weight)` bilinear taps per point.
    pub taps: Vec<[(usize, f64); 4]>,
    /// Pre-augmentation colors of every output row.
    pub source_colors: Option<Vec<[f32; 3]>>,
}

/// Number of steps in one pass over the scenes.
pub fn steps_per_epoch(n_scenes: usize, batch: usize) -> usize {
    n_scenes.div_ceil(batch.min(n_scenes).max(1)).max(1)
}

/// Scene indices used at `step`: one shuffled pass per epoch.
pub fn batch_indices(n_scenes: usize, cfg: &TrainConfig, step: usize) -> Vec<usize> {
    let b = cfg.batch_scenes.min(n_scenes);
    let spe = steps_per_epoch(n_scenes, b);
    let epoch = step / spe;
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut stream_rng(cfg.seed, u64::MAX, epoch as u64));
    let start = (step % spe) * b;
    (0..b).map(|i| order[(start + i) % n_scenes]).collect()
}

fn build_scene(
    scenes: &[PreparedScene],
    provider: &TargetProvider,
    cfg: &TrainConfig,
    step: usize,
    slot: usize,
    idx: usize,
) -> Result<BatchScene> {
    let mut rng = stream_rng(cfg.seed, step as u64, slot as u64);
    let base = &scenes[idx];
    let partner_idx = if scenes.len() > 1 {
        let j = rng.random_range(0..scenes.len() - 1);
        if j >= idx {
            j + 1
        } else {
            j
        }
    } else {
        idx
    };
    let partner = &scenes[partner_idx];
    let compatible = partner.cloud.source_size() == base.cloud.source_size()
        && partner.cloud.colors().is_some() == base.cloud.colors().is_some()
        && scenes.len() > 1;
    let (mixed, did_mix) = if compatible {
        view_mixup(&base.cloud, &partner.cloud, cfg.mixup, &mut rng)?
    } else {
        let _: f64 = rng.random();
        (base.cloud.clone(), false)
    };
    let (view, uv) = paired_views(&mixed, &cfg.augmentation(), &mut rng)?;
    let neighbors = knn_indices(&view.cloud, cfg.encoder.k)?;
    let size = view.cloud.source_size();
    let (gx, gy) = provider.grid_size();
    let grids: [&TargetGrid; 2] = match provider.constant_grid() {
        Some(g) => [g, g],
        None => [
            base.grid.as_ref().expect("conv scenes carry a grid"),
            partner.grid.as_ref().expect("conv scenes carry a grid"),
        ],
    };
    let n = view.len();
    let mut targets = Array2::zeros((n, provider.d_model()));
    let mut labels = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    for (i, (&p, &sv)) in uv.iter().zip(view.cloud.src_view()).enumerate() {
        let g = grids[usize::from(sv > 0)];
        for (t, v) in targets.row_mut(i).iter_mut().zip(sample_grid(g, p, size)) {
            *t = v;
        }
        labels.push(nearest_cell(p, size, gx, gy));
        taps.push(bilinear_weights(grid_coords(p, size, gx, gy), gx, gy));
    }
    let source_colors = mixed
        .colors()
        .map(|c| view.source_rows.iter().map(|&r| c[r]).collect());
    Ok(BatchScene {
        scene: idx,
        partner: did_mix.then_some(partner_idx),
        view,
        neighbors,
        targets,
        labels,
        taps,
        source_colors,
    })
}

/// Builds the batch for `step`: per scene, optional mixup with a partner,
/// one augmented view, and per-point targets sampled at the source pixels.
pub fn build_batch(
    scenes: &[PreparedScene],
    provider: &TargetProvider,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<BatchScene>> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty batch: no scenes"));
    }
    let idx = batch_indices(scenes.len(), cfg, step);
    par::map_range(idx.len(), |slot| {
        build_scene(scenes, provider, cfg, step, slot, idx[slot])
    })
    .into_iter()
    .collect()
}

/// Converts a batch scene into loss inputs.
pub fn scene_inputs<T: ndarray::NdFloat>(
    item: &BatchScene,
    cfg: &TrainConfig,
    provider: &TargetProvider,
) -> Result<SceneInputs<T>> {
    let cloud = &item.view.cloud;
    let x = encoder_input(cloud.positions(), cloud.colors(), &item.neighbors, &cfg.encoder)?;
    let cast = |a: &Array2<f64>| a.mapv(|v| T::from(v).unwrap());
    let n = cloud.len();
    let learnable = provider.variant() == TargetVariant::Learnable;
    let target_weights = learnable.then(|| {
        let (gx, gy) = provider.grid_size();
        let mut w = Array2::zeros((n, gx * gy));
        for (i, taps) in item.taps.iter().enumerate() {
            for &(c, v) in taps {
                w[[i, c]] += T::from(v).unwrap();
            }
        }
        w
    });
    let cell_vectors = (cfg.objective == Objective::PositionClassification)
        .then(|| provider.constant_grid().map(|g| cast(&g.as_matrix().to_owned())))
        .flatten();
    let color_target = match (&item.source_colors, cfg.color_loss_weight > 0.0) {
        (Some(c), true) => Some((
            Array2::from_shape_fn((n, 3), |(i, ch)| T::from(c[i][ch]).unwrap()),
            item.view.masked.clone(),
        )),
        _ => None,
    };
    Ok(SceneInputs {
        encoder_input: x,
        targets: (!learnable).then(|| cast(&item.targets)),
        target_weights,
        labels: item.labels.clone(),
        cell_vectors,
        color_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

pub const METRICS_HEADER: &str = "step,lr,loss,pos_sim,neg_sim";

impl MetricsLog {
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::invalid(format!(
                    "metric step {} does not follow {}",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.step, r.lr, r.loss, r.pos_sim, r.neg_sim
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {METRICS_HEADER:?}"),
                })
            }
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected 5 fields".into(),
                });
            }
            log.push(MetricRecord {
                step: parse_value("step", f[0], i + 1)?,
                lr: parse_value("lr", f[1], i + 1)?,
                loss: parse_value("loss", f[2], i + 1)?,
                pos_sim: parse_value("pos_sim", f[3], i + 1)?,
                neg_sim: parse_value("neg_sim", f[4], i + 1)?,
            })?;
        }
        Ok(log)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Owns parameters, optimizer state, and the metrics log of one run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub provider: TargetProvider,
    pub scenes: Vec<PreparedScene>,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: MetricsLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, scenes: Vec<PreparedScene>) -> Result<Self> {
        cfg.validate()?;
        let provider = cfg.provider()?;
        let model = cfg.model_config();
        let embedding = provider
            .constant_grid()
            .filter(|_| model.learnable_cells > 0)
            .map(|g| g.as_matrix().to_owned());
        let params = init_params(&model, cfg.seed, embedding.as_ref())?;
        let optimizer = OptimizerState::new(&params);
        Ok(Trainer {
            cfg,
            model,
            provider,
            scenes,
            params,
            optimizer,
            log: MetricsLog::default(),
        })
    }

    /// Continues from a checkpoint; `log` carries the metrics written so far.
    pub fn resume(
        cfg: TrainConfig,
        scenes: Vec<PreparedScene>,
        ckpt: Checkpoint,
        log: MetricsLog,
    ) -> Result<Self> {
        let mut t = Trainer::new(cfg, scenes)?;
        if !ckpt.params.same_layout(&t.params) {
            return Err(Error::invalid(
                "checkpoint parameters do not match the configured model",
            ));
        }
        t.params = ckpt.params;
        t.optimizer = ckpt.optimizer;
        t.log = log;
        t.log.records.retain(|r| r.step < t.optimizer.step);
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.scenes.len(), self.cfg.batch_scenes)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps.unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    /// Next step index.
    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.cfg.to_pairs();
        meta.push(("step".into(), self.step().to_string()));
        meta.push(("epoch".into(), (self.step() / self.steps_per_epoch()).to_string()));
        Checkpoint {
            meta,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Mean loss, mean gradient, and metrics of one batch at the current
    /// parameters.
    pub fn evaluate_batch(
        &self,
        batch: &[BatchScene],
        want_grad: bool,
    ) -> Result<(MetricRecord, Option<GradientSet<f32>>)> {
        let loss_cfg = self.cfg.loss_config();
        let results = par::map_range(batch.len(), |i| {
            let inputs = scene_inputs::<f32>(&batch[i], &self.cfg, &self.provider)?;
            scene_loss(&self.model, &loss_cfg, &self.params, &inputs, want_grad)
        });
        let b = batch.len() as f64;
        let mut rec = MetricRecord {
            step: self.step(),
            lr: 0.0,
            loss: 0.0,
            pos_sim: 0.0,
            neg_sim: 0.0,
        };
        let mut grads: Option<GradientSet<f32>> = None;
        for r in results {
            let (out, g) = r?;
            rec.loss += out.loss / b;
            rec.pos_sim += out.pos_sim / b;
            rec.neg_sim += out.neg_sim / b;
            if let Some(g) = g {
                match grads.as_mut() {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    None => grads = Some(g),
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            g.scale(1.0 / batch.len() as f32);
        }
        Ok((rec, grads))
    }

    /// Runs one optimizer step and logs it.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let step = self.step();
        let total = self.total_steps();
        let batch = build_batch(&self.scenes, &self.provider, &self.cfg, step)?;
        let (mut rec, grads) = self.evaluate_batch(&batch, true)?;
        let grads = grads.expect("gradients requested");
        if !rec.loss.is_finite() || !grads.all_finite() {
            let seed = batch_seed(self.cfg.seed, step);
            log::error!(
                "non-finite loss at step {step}; batch scenes {:?}, batch seed {seed:#x}",
                batch
                    .iter()
                    .map(|b| &self.scenes[b.scene].name)
                    .collect::<Vec<_>>()
            );
            return Err(Error::NonFinite {
                step,
                batch_seed: seed,
            });
        }
        let lr = cosine_lr(self.cfg.lr, step, total, self.cfg.warmup_steps);
        sgd_momentum_step(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
        )?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite {
                step,
                batch_seed: batch_seed(self.cfg.seed, step),
            });
        }
        rec.lr = lr;
        self.log.push(rec)?;
        Ok(rec)
    }

    /// Trains until `until` steps have been taken (capped at the total),
    /// writing checkpoints and metrics into `out_dir` when given.
    pub fn run(&mut self, until: Option<usize>, out_dir: Option<&Path>) -> Result<()> {
        let total = self.total_steps();
        let until = until.unwrap_or(total).min(total);
        let spe = self.steps_per_epoch();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.step() == 0 {
                save_checkpoint(&epoch_checkpoint_path(dir, 0), &self.checkpoint())?;
            }
        }
        while self.step() < until {
            let rec = self.train_step()?;
            if rec.step % 10 == 0 || rec.step + 1 == total {
                log::info!(
                    "step {:>5}/{total} lr {:.4} loss {:.4} pos {:.3} neg {:.3}",
                    rec.step,
                    rec.lr,
                    rec.loss,
                    rec.pos_sim,
                    rec.neg_sim
                );
            }
            if let Some(dir) = out_dir {
                if self.step().is_multiple_of(spe) || self.step() == total {
                    let epoch = self.step().div_ceil(spe);
                    save_checkpoint(&epoch_checkpoint_path(dir, epoch), &self.checkpoint())?;
                    self.log.write(dir.join(METRICS_FILE))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            if self.step() == total {
                save_checkpoint(&dir.join(FINAL_CHECKPOINT), &self.checkpoint())?;
            }
            self.log.write(dir.join(METRICS_FILE))?;
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch_{epoch:03}.bin"))
}

/// Epoch checkpoints in a directory, sorted by epoch.
pub fn list_epoch_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_epoch_"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse().ok());
        if let Some(e) = epoch {
            out.push((e, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Result of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: MetricsLog,
}

/// Prepares the manifest scenes and trains from scratch (or from `resume`).
pub fn train(
    cfg: &TrainConfig,
    entries: &[ManifestEntry],
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    par::with_threads(cfg.threads, || {
        let provider = cfg.provider()?;
        let scenes = prepare_scenes(entries, &provider)?;
        let mut trainer = match resume {
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                let log = match out_dir.map(|d| d.join(METRICS_FILE)) {
                    Some(p) if p.exists() => {
                        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                        MetricsLog::parse_csv(&text)?
                    }
                    _ => MetricsLog::default(),
                };
                Trainer::resume(cfg.clone(), scenes, ckpt, log)?
            }
            None => Trainer::new(cfg.clone(), scenes)?,
        };
        trainer.run(None, out_dir)?;
        Ok(TrainOutcome {
            params: trainer.params,
            optimizer: trainer.optimizer,
            log: trainer.log,
        })
    })
}
