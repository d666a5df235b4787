//! Strong 3D augmentations with exact correspondence tracking.
//!
//! Order: scale → rotate → translate → crop → drop → sample → color jitter →
//! block color mask. Geometry changes never touch `src_uv`, so every output
//! row can still be traced to the pixel it came from.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pcd::{PointCloud, DEFAULT_GRID_CELL};

const MAX_CROP_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub scale: [f64; 2],
    /// Rotation about the gravity (world z) axis, radians.
    pub yaw: [f64; 2],
    /// Rotation about each horizontal axis, radians.
    pub tilt: [f64; 2],
    /// Per-axis translation, meters.
    pub translation: [f64; 2],
    /// Fraction of the horizontal extent kept by the crop box, per axis.
    pub crop_keep: [f64; 2],
    pub drop_ratio: f64,
    /// Output row count; `None` keeps whatever survives crop and drop.
    pub sample_count: Option<usize>,
    pub color_jitter: f64,
    pub mask_ratio: f64,
    /// Edge of a color-mask block in grid voxels.
    pub mask_block_voxels: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale: [0.8, 1.25],
            yaw: [0.0, std::f64::consts::TAU],
            tilt: [-0.1, 0.1],
            translation: [-0.1, 0.1],
            crop_keep: [0.6, 1.0],
            drop_ratio: 0.2,
            sample_count: Some(4096),
            color_jitter: 0.05,
            mask_ratio: 0.3,
            mask_block_voxels: 5,
        }
    }
}

impl AugmentationConfig {
    /// Configuration that leaves every point untouched.
    pub fn identity() -> Self {
        AugmentationConfig {
            scale: [1.0, 1.0],
            yaw: [0.0, 0.0],
            tilt: [0.0, 0.0],
            translation: [0.0, 0.0],
            crop_keep: [1.0, 1.0],
            drop_ratio: 0.0,
            sample_count: None,
            color_jitter: 0.0,
            mask_ratio: 0.0,
            mask_block_voxels: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} range {r:?} is not ordered")))
            }
        };
        ordered("scale", self.scale)?;
        ordered("yaw", self.yaw)?;
        ordered("tilt", self.tilt)?;
        ordered("translation", self.translation)?;
        ordered("crop_keep", self.crop_keep)?;
        if !(self.scale[0] > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        if !(self.crop_keep[0] > 0.0 && self.crop_keep[1] <= 1.0) {
            return Err(Error::invalid("crop keep-ratio must lie in (0, 1]"));
        }
        for (name, v) in [("drop_ratio", self.drop_ratio), ("mask_ratio", self.mask_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.color_jitter >= 0.0) {
            return Err(Error::invalid("color jitter amplitude must be >= 0"));
        }
        if self.sample_count == Some(0) || self.mask_block_voxels == 0 {
            return Err(Error::invalid(
                "sample count and mask block size must be positive",
            ));
        }
        Ok(())
    }
}

/// `p ↦ scale · R · p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) * self.scale + self.translation;
        [q.x, q.y, q.z]
    }
}

/// Axis-aligned crop region in the transformed frame. Unbounded along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CropBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    /// Augmented points. `point_id` is the output row index.
    pub cloud: PointCloud,
    /// Source `point_id` of every output row.
    pub kept: Vec<u64>,
    /// Source row of every output row.
    pub source_rows: Vec<usize>,
    pub transform: Similarity,
    /// `None` when cropping fell back to pass-through.
    pub crop: Option<CropBox>,
    /// Rows whose colors were zeroed by block masking.
    pub masked: Vec<bool>,
}

impl AugmentedView {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Per-channel additive uniform noise in `[-amplitude, amplitude]`, clamped
/// to `[0, 1]`.
pub fn color_jitter<R: Rng + ?Sized>(colors: &[[f32; 3]], amplitude: f64, rng: &mut R) -> Vec<[f32; 3]> {
    if amplitude <= 0.0 {
        return colors.to_vec();
    }
    let a = amplitude as f32;
    colors
        .iter()
        .map(|c| c.map(|v| (v + rng.random_range(-a..=a)).clamp(0.0, 1.0)))
        .collect()
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn block_selected(key: [i64; 3], salt: u64, ratio: f64) -> bool {
    let mut h = salt;
    for k in key {
        h = splitmix64(h ^ k as u64);
    }
    ((h >> 11) as f64 / (1u64 << 53) as f64) < ratio
}

fn draw_similarity<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Similarity {
    let scale = uniform(rng, cfg.scale);
    let yaw = uniform(rng, cfg.yaw);
    let tilt_x = uniform(rng, cfg.tilt);
    let tilt_y = uniform(rng, cfg.tilt);
    let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), tilt_y)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), tilt_x);
    let translation = Vector3::new(
        uniform(rng, cfg.translation),
        uniform(rng, cfg.translation),
        uniform(rng, cfg.translation),
    );
    Similarity {
        scale,
        rotation: *rotation.matrix(),
        translation,
    }
}

fn draw_crop<R: Rng + ?Sized>(positions: &[[f64; 3]], keep: f64, rng: &mut R) -> CropBox {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in positions {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut min = [f64::NEG_INFINITY; 3];
    let mut max = [f64::INFINITY; 3];
    for a in 0..2 {
        let size = keep * (hi[a] - lo[a]);
        let slack = (hi[a] - lo[a]) - size;
        let start = lo[a]
            + if slack > 0.0 {
                rng.random_range(0.0..=slack)
            } else {
                0.0
            };
        min[a] = start;
        max[a] = if keep >= 1.0 { hi[a] } else { start + size };
    }
    CropBox { min, max }
}

/// Applies the full augmentation chain. See the module docs for the order.
pub fn apply_augmentations<R: Rng + ?Sized>(
    pc: &PointCloud,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedView> {
    if pc.is_empty() {
        return Err(Error::invalid("cannot augment an empty point cloud"));
    }
    cfg.validate()?;

    let transform = draw_similarity(cfg, rng);
    let moved: Vec<[f64; 3]> = pc.positions().iter().map(|p| transform.apply(p)).collect();

    // crop
    let mut keep = uniform(rng, cfg.crop_keep);
    let mut crop = None;
    let mut rows: Vec<usize> = Vec::new();
    for attempt in 0..=MAX_CROP_RETRIES {
        let bx = draw_crop(&moved, keep, rng);
        rows = (0..moved.len()).filter(|&i| bx.contains(&moved[i])).collect();
        if !rows.is_empty() {
            crop = Some(bx);
            break;
        }
        if attempt < MAX_CROP_RETRIES {
            keep = 0.5 * (keep + 1.0);
        }
    }
    if crop.is_none() {
        rows = (0..moved.len()).collect();
    }

    // drop
    if cfg.drop_ratio > 0.0 && rows.len() > 1 {
        let n = rows.len();
        let n_keep = ((n as f64 * (1.0 - cfg.drop_ratio)).round() as usize).clamp(1, n);
        let mut pick = index::sample(rng, n, n_keep).into_vec();
        pick.sort_unstable();
        rows = pick.into_iter().map(|i| rows[i]).collect();
    }

    // sample to target count
    if let Some(target) = cfg.sample_count {
        let n = rows.len();
        if n > target {
            let mut pick = index::sample(rng, n, target).into_vec();
            pick.sort_unstable();
            rows = pick.into_iter().map(|i| rows[i]).collect();
        } else if n < target {
            let extra: Vec<usize> = (0..target - n).map(|_| rows[rng.random_range(0..n)]).collect();
            rows.extend(extra);
        }
    }

    let mut cloud = pc.gather_rows(&rows);
    for (dst, &r) in cloud.positions_mut().iter_mut().zip(&rows) {
        *dst = moved[r];
    }
    let kept: Vec<u64> = cloud.point_id().to_vec();
    let n_out = rows.len();
    let cloud = {
        let colors = cloud.colors().map(|c| c.to_vec());
        PointCloud::from_parts(
            cloud.positions().to_vec(),
            colors,
            cloud.src_uv().to_vec(),
            cloud.src_view().to_vec(),
            (0..n_out as u64).collect(),
            cloud.source_size(),
        )?
    };
    let mut cloud = cloud;

    // colors: jitter, then block mask
    let salt: u64 = rng.random();
    let block = cfg.mask_block_voxels as f64 * DEFAULT_GRID_CELL;
    let masked: Vec<bool> = if cfg.mask_ratio > 0.0 {
        cloud
            .positions()
            .iter()
            .map(|p| {
                let key = [
                    (p[0] / block).floor() as i64,
                    (p[1] / block).floor() as i64,
                    (p[2] / block).floor() as i64,
                ];
                block_selected(key, salt, cfg.mask_ratio)
            })
            .collect()
    } else {
        vec![false; n_out]
    };
    if let Some(colors) = cloud.colors_mut() {
        let jittered = color_jitter(colors, cfg.color_jitter, rng);
        *colors = jittered;
        for (c, &m) in colors.iter_mut().zip(&masked) {
            if m {
                *c = [0.0; 3];
            }
        }
    }

    Ok(AugmentedView {
        cloud,
        kept,
        source_rows: rows,
        transform,
        crop,
        masked,
    })
}

/// One augmented online view plus, for every output row, the source pixel
/// its target is sampled at.
pub fn paired_views<R: Rng + ?Sized>(
    pc: &PointCloud,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(AugmentedView, Vec<[f64; 2]>)> {
    let view = apply_augmentations(pc, cfg, rng)?;
    let table = view.cloud.src_uv().to_vec();
    Ok((view, table))
}
