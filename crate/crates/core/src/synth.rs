//! Procedural indoor frames: an axis-aligned room with axis-aligned boxes,
//! ray cast through a pinhole camera. Depth values are exact intersection
//! depths along the optical axis, so geometric checks stay analytic.
//!
//! Scene frame: z up, room floor at z = 0.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraIntrinsics, WorldTransform, DEPTH_CLIP_MAX};
use crate::dataio::{write_color_ppm, write_depth_pfm, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthKind, DepthMap};

pub const MIN_ROOM_EXTENT: f64 = 2.0;
pub const MAX_ROOM_EXTENT: f64 = 6.0;
pub const MAX_BOXES: usize = 6;

const LIGHT_DIR: [f64; 3] = [
    0.267_261_241_912_424_4,
    0.534_522_483_824_848_8,
    0.801_783_725_737_273_2,
];
const AMBIENT: f32 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub albedo: [f32; 3],
}

impl SceneBox {
    fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - 0.5 * self.size[i])
    }

    fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + 0.5 * self.size[i])
    }

    fn contains(&self, p: &[f64; 3], margin: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] > lo[i] - margin && p[i] < hi[i] + margin)
    }
}

/// Camera placement in the scene frame. At zero yaw and pitch the camera
/// looks along +y with image-up along +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Rotation about +z, radians.
    pub yaw: f64,
    /// Rotation about the camera's right axis, radians; negative looks down.
    pub pitch: f64,
}

impl CameraPose {
    /// Camera-to-scene rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        let base = WorldTransform::axis_exchange().rotation().transpose();
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch);
        yaw.matrix() * pitch.matrix() * base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub boxes: Vec<SceneBox>,
    /// Albedo per wall in the order -x, +x, -y, +y, floor, ceiling.
    pub wall_albedos: [[f32; 3]; 6],
    /// Viewpoint chosen when the scene was sampled.
    pub camera: CameraPose,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.room_max[i] - self.room_min[i] > 0.0)) {
            return Err(Error::invalid("room extents must be positive"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let (lo, hi) = (b.min(), b.max());
            if (0..3).any(|a| !(b.size[a] > 0.0) || lo[a] < self.room_min[a] || hi[a] > self.room_max[a]) {
                return Err(Error::invalid(format!("box {i} is empty or leaves the room")));
            }
        }
        Ok(())
    }

    fn room_contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] > self.room_min[i] && p[i] < self.room_max[i])
    }

    /// Distance from `p` to the farthest room corner.
    fn farthest_corner(&self, p: &[f64; 3]) -> f64 {
        (0..3)
            .map(|i| {
                let d = (p[i] - self.room_min[i]).max(self.room_max[i] - p[i]);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    albedo: [f32; 3],
}

fn intersect_room(spec: &SceneSpec, o: &[f64; 3], d: &[f64; 3]) -> Option<Hit> {
    let mut best: Option<(f64, usize, bool)> = None;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        let positive = d[axis] > 0.0;
        let bound = if positive {
            spec.room_max[axis]
        } else {
            spec.room_min[axis]
        };
        let t = (bound - o[axis]) / d[axis];
        if best.is_none_or(|(bt, _, _)| t < bt) {
            best = Some((t, axis, positive));
        }
    }
    let (t, axis, positive) = best?;
    let mut normal = [0.0; 3];
    normal[axis] = if positive { -1.0 } else { 1.0 };
    Some(Hit {
        t,
        normal,
        albedo: spec.wall_albedos[axis * 2 + positive as usize],
    })
}

fn intersect_box(b: &SceneBox, o: &[f64; 3], d: &[f64; 3]) -> Option<Hit> {
    let (lo, hi) = (b.min(), b.max());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = 1.0;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            if o[axis] < lo[axis] || o[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let t1 = (lo[axis] - o[axis]) / d[axis];
        let t2 = (hi[axis] - o[axis]) / d[axis];
        let (ta, tb) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if ta > t_near {
            t_near = ta;
            near_axis = axis;
            near_sign = if d[axis] > 0.0 { -1.0 } else { 1.0 };
        }
        t_far = t_far.min(tb);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[near_axis] = near_sign;
    Some(Hit {
        t: t_near,
        normal,
        albedo: b.albedo,
    })
}

fn shade(hit: &Hit) -> [f32; 3] {
    let lambert = (hit.normal[0] * LIGHT_DIR[0] + hit.normal[1] * LIGHT_DIR[1] + hit.normal[2] * LIGHT_DIR[2])
        .abs() as f32;
    let f = AMBIENT + (1.0 - AMBIENT) * lambert;
    hit.albedo.map(|c| (c * f).clamp(0.0, 1.0))
}

/// Renders metric depth and shaded color for one viewpoint.
pub fn generate_frame(
    spec: &SceneSpec,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<(DepthMap, ColorImage)> {
    spec.validate()?;
    if !pose.position.iter().all(|v| v.is_finite()) || !spec.room_contains(&pose.position) {
        return Err(Error::invalid(format!(
            "camera position {:?} is not strictly inside the room",
            pose.position
        )));
    }
    if spec.boxes.iter().any(|b| b.contains(&pose.position, 0.0)) {
        return Err(Error::invalid("camera position is inside a box"));
    }
    let rot = pose.rotation();
    let kinv = k.inverse_matrix();
    let o = pose.position;
    let mut depth = Vec::with_capacity(k.width * k.height);
    let mut color = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // camera-frame direction has unit z, so the ray parameter is the depth
            let dc = kinv * Vector3::new(u as f64, v as f64, 1.0);
            let ds = rot * dc;
            let d = [ds.x, ds.y, ds.z];
            let mut hit =
                intersect_room(spec, &o, &d).ok_or_else(|| Error::invalid("degenerate ray direction"))?;
            for b in &spec.boxes {
                if let Some(h) = intersect_box(b, &o, &d) {
                    if h.t < hit.t {
                        hit = h;
                    }
                }
            }
            depth.push(hit.t);
            color.push(shade(&hit));
        }
    }
    Ok((
        DepthMap::new(k.width, k.height, depth, DepthKind::Metric)?,
        ColorImage::new(k.width, k.height, color)?,
    ))
}

fn random_albedo<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
        rng.random_range(0.1..0.95),
    ]
}

/// Samples a room, 1–6 floor-standing boxes, and a viewpoint from which
/// every visible surface lies within the metric depth ceiling.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    let seed: u64 = rng.random();
    let ext: [f64; 3] = std::array::from_fn(|_| rng.random_range(MIN_ROOM_EXTENT..=MAX_ROOM_EXTENT));
    let room_min = [-0.5 * ext[0], -0.5 * ext[1], 0.0];
    let room_max = [0.5 * ext[0], 0.5 * ext[1], ext[2]];
    let wall_albedos: [[f32; 3]; 6] = std::array::from_fn(|_| random_albedo(rng));

    let mut spec = SceneSpec {
        room_min,
        room_max,
        boxes: Vec::new(),
        wall_albedos,
        camera: CameraPose {
            position: [0.0, 0.0, 0.5 * ext[2]],
            yaw: 0.0,
            pitch: 0.0,
        },
        seed,
    };

    let height_hi = (ext[2] - 0.3).min(1.8);
    let mut position = [0.0, 0.0, 0.5 * ext[2].min(2.0)];
    for _ in 0..64 {
        let p = [
            rng.random_range(-0.25 * ext[0]..=0.25 * ext[0]),
            rng.random_range(-0.25 * ext[1]..=0.25 * ext[1]),
            rng.random_range(1.0..=height_hi),
        ];
        if spec.farthest_corner(&p) < DEPTH_CLIP_MAX - 0.05 {
            position = p;
            break;
        }
    }
    spec.camera = CameraPose {
        position,
        yaw: rng.random_range(0.0..std::f64::consts::TAU),
        pitch: rng.random_range(-0.25..0.05),
    };

    let count = rng.random_range(1..=MAX_BOXES);
    let mut attempts = 0;
    while spec.boxes.len() < count && attempts < 200 {
        attempts += 1;
        let size = [
            rng.random_range(0.2..=(0.5 * ext[0]).min(1.5)),
            rng.random_range(0.2..=(0.5 * ext[1]).min(1.5)),
            rng.random_range(0.2..=(0.6 * ext[2]).min(1.5)),
        ];
        let center = [
            rng.random_range(room_min[0] + 0.5 * size[0]..=room_max[0] - 0.5 * size[0]),
            rng.random_range(room_min[1] + 0.5 * size[1]..=room_max[1] - 0.5 * size[1]),
            0.5 * size[2],
        ];
        let b = SceneBox {
            center,
            size,
            albedo: random_albedo(rng),
        };
        if !b.contains(&position, 0.3) {
            spec.boxes.push(b);
        }
    }
    if spec.boxes.is_empty() {
        // small box tucked into the corner farthest from the camera
        let cx = if position[0] > 0.0 {
            room_min[0] + 0.15
        } else {
            room_max[0] - 0.15
        };
        let cy = if position[1] > 0.0 {
            room_min[1] + 0.15
        } else {
            room_max[1] - 0.15
        };
        spec.boxes.push(SceneBox {
            center: [cx, cy, 0.1],
            size: [0.2, 0.2, 0.2],
            albedo: random_albedo(rng),
        });
    }
    spec
}

/// Default frame size written by [`write_dataset`].
pub const DEFAULT_SYNTH_WIDTH: usize = 160;
pub const DEFAULT_SYNTH_HEIGHT: usize = 120;

/// Renders scene `index` of the dataset identified by `seed`.
pub fn render_scene(
    seed: u64,
    index: usize,
    width: usize,
    height: usize,
) -> Result<(SceneSpec, DepthMap, ColorImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let spec = sample_scene(&mut rng);
    let k = CameraIntrinsics::for_size(width, height)?;
    let (depth, color) = generate_frame(&spec, &k, &spec.camera)?;
    Ok((spec, depth, color))
}

/// Writes `scenes` depth/color pairs plus `manifest.txt` into `out`.
pub fn write_dataset(out: &Path, scenes: usize, seed: u64, width: usize, height: usize) -> Result<Manifest> {
    if scenes == 0 {
        return Err(Error::invalid("scene count must be positive"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let frames = crate::par::map_range(scenes, |i| render_scene(seed, i, width, height));
    let mut manifest = Manifest::default();
    for (i, frame) in frames.into_iter().enumerate() {
        let (_, depth, color) = frame?;
        let depth_path = out.join(format!("scene_{i:04}_depth.pfm"));
        let color_path = out.join(format!("scene_{i:04}_color.ppm"));
        write_depth_pfm(&depth, &depth_path)?;
        write_color_ppm(&color, &color_path)?;
        manifest.entries.push(ManifestEntry {
            depth_path,
            color_path: Some(color_path),
            width,
            height,
            depth_kind: DepthKind::Metric,
        });
    }
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
