//! Pinhole camera geometry: intrinsics, inverse-depth conversion, and the
//! back-projection / projection pair that lifts depth maps into world-frame
//! point clouds.
//!
//! Camera frame: x right, y down, z forward (optical axis). World frame:
//! the camera's y and z axes exchanged, with one axis negated so the
//! transform is a proper rotation. World z is "up".

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pcd::PointCloud;
use crate::raster::{ColorImage, DepthKind, DepthMap};

/// Reference sensor the intrinsics are scaled from.
pub const REFERENCE_WIDTH: f64 = 1296.0;
pub const REFERENCE_HEIGHT: f64 = 968.0;
pub const REFERENCE_FX: f64 = 574.0;
pub const REFERENCE_FY: f64 = 575.0;
pub const REFERENCE_CX: f64 = 324.0;
pub const REFERENCE_CY: f64 = 241.0;

/// Inverse depth is scaled by `fx * DEPTH_SCALE_PER_FX` before inversion.
pub const DEPTH_SCALE_PER_FX: f64 = 0.01;
/// Metric depth ceiling, meters.
pub const DEPTH_CLIP_MAX: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx.is_finite()
            && fy.is_finite()
            && fx > 0.0
            && fy > 0.0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::invalid(format!(
                "intrinsics fx={fx} fy={fy} cx={cx} cy={cy} invalid for {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics of the reference sensor rescaled to an image of the given
    /// size. Focal lengths and principal point scale linearly with width
    /// (x terms) and height (y terms).
    pub fn for_size(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        let sw = width as f64 / REFERENCE_WIDTH;
        let sh = height as f64 / REFERENCE_HEIGHT;
        Self::new(
            REFERENCE_FX * sw,
            REFERENCE_FY * sh,
            REFERENCE_CX * sw,
            REFERENCE_CY * sh,
            width,
            height,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of [`matrix`](Self::matrix).
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Shorthand for [`CameraIntrinsics::for_size`].
pub fn intrinsics_for_size(width: usize, height: usize) -> Result<CameraIntrinsics> {
    CameraIntrinsics::for_size(width, height)
}

/// Rigid transform from world to camera coordinates: `cam = R * world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl WorldTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(WorldTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        WorldTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Y/Z axis exchange as a proper rotation: camera `(x, y, z)` maps to
    /// world `(x, z, -y)`, so the optical axis becomes world +y and image
    /// "down" becomes world -z.
    pub fn axis_exchange() -> Self {
        WorldTransform {
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &WorldTransform) -> WorldTransform {
        WorldTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (c - self.translation)
    }
}

/// Converts inverse depth to metric depth: `W = clip(0.01 * fx / W', 0, 6)`.
/// Zero inverse depth (a point at infinity) maps to the ceiling.
pub fn inverse_depth_to_metric(inv: &DepthMap, k: &CameraIntrinsics) -> Result<DepthMap> {
    if inv.kind() != DepthKind::Inverse {
        return Err(Error::invalid("expected an inverse depth map"));
    }
    let scale = k.fx * DEPTH_SCALE_PER_FX;
    let values = inv
        .values()
        .iter()
        .map(|&w| {
            if w == 0.0 {
                DEPTH_CLIP_MAX
            } else {
                (scale / w).clamp(0.0, DEPTH_CLIP_MAX)
            }
        })
        .collect();
    DepthMap::new(inv.width(), inv.height(), values, DepthKind::Metric)
}

/// Lifts every pixel with depth in `(0, ceiling]` to a world-frame point:
/// `X = R⁻¹ (K⁻¹ · w · [u, v, 1]ᵀ − t)`.
///
/// Points are emitted in raster order; each records its source pixel,
/// `src_view = 0`, and `point_id` equal to its raster index.
pub fn backproject(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    xform: &WorldTransform,
    color: Option<&ColorImage>,
) -> Result<PointCloud> {
    if depth.kind() != DepthKind::Metric {
        return Err(Error::invalid("backproject expects a metric depth map"));
    }
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::invalid(format!(
            "depth map is {}x{} but intrinsics are for {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    if let Some(img) = color {
        if img.width() != depth.width() || img.height() != depth.height() {
            return Err(Error::invalid(format!(
                "color image is {}x{} but depth map is {}x{}",
                img.width(),
                img.height(),
                depth.width(),
                depth.height()
            )));
        }
    }
    let kinv = k.inverse_matrix();
    let mut positions = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    let mut src_uv = Vec::new();
    let mut point_id = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let w = depth.get(u, v);
            if !(w > 0.0 && w <= DEPTH_CLIP_MAX) {
                continue;
            }
            let cam = kinv * Vector3::new(u as f64, v as f64, 1.0) * w;
            let p = xform.camera_to_world(&cam);
            positions.push([p.x, p.y, p.z]);
            if let (Some(cs), Some(img)) = (colors.as_mut(), color) {
                cs.push(img.get(u, v));
            }
            src_uv.push([u as f64, v as f64]);
            point_id.push((v * depth.width() + u) as u64);
        }
    }
    let n = positions.len();
    PointCloud::from_parts(
        positions,
        colors,
        src_uv,
        vec![0; n],
        point_id,
        (depth.width(), depth.height()),
    )
}

/// Pixel coordinates and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

/// Projects world points into the image: `w [u, v, 1]ᵀ = K (R X + t)`.
/// Points at or behind the camera plane come back as `None`.
pub fn project_points(
    positions: &[[f64; 3]],
    k: &CameraIntrinsics,
    xform: &WorldTransform,
) -> Vec<Option<Projection>> {
    let km = k.matrix();
    positions
        .iter()
        .map(|p| {
            let cam = xform.world_to_camera(&Vector3::new(p[0], p[1], p[2]));
            if !(cam.z > 0.0) {
                return None;
            }
            let h = km * cam;
            Some(Projection {
                u: h.x / h.z,
                v: h.y / h.z,
                w: cam.z,
            })
        })
        .collect()
}

/// [`project_points`] over a cloud's positions.
pub fn project(pc: &PointCloud, k: &CameraIntrinsics, xform: &WorldTransform) -> Vec<Option<Projection>> {
    project_points(pc.positions(), k, xform)
}
