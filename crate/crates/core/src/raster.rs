//! Per-pixel rasters: depth maps and RGB images. Row-major, top row first.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepthKind {
    /// Meters along the camera's optical axis.
    Metric,
    /// Unitless inverse depth, as produced by monocular depth estimators.
    Inverse,
}

impl DepthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthKind::Metric => "metric",
            DepthKind::Inverse => "inverse",
        }
    }
}

impl std::str::FromStr for DepthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "metric" => Ok(DepthKind::Metric),
            "inverse" => Ok(DepthKind::Inverse),
            other => Err(Error::invalid(format!(
                "unknown depth kind {other:?} (expected metric or inverse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    kind: DepthKind,
}

impl DepthMap {
    /// Builds a depth map, rejecting negative or non-finite values.
    pub fn new(width: usize, height: usize, values: Vec<f64>, kind: DepthKind) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "depth value at index {bad} is {} (must be finite and >= 0)",
                values[bad]
            )));
        }
        Ok(DepthMap {
            width,
            height,
            values,
            kind,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> DepthKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }
}

/// RGB image with channels normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "color image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(ColorImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        ColorImage {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f32; 3] {
        self.pixels[v * self.width + u]
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<ColorImage> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("cannot resize to or from an empty image"));
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                let (a, b) = (self.get(x0, y0), self.get(x1, y0));
                let (c, d) = (self.get(x0, y1), self.get(x1, y1));
                let mut px = [0.0f32; 3];
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * tx;
                    let bot = c[ch] + (d[ch] - c[ch]) * tx;
                    px[ch] = top + (bot - top) * ty;
                }
                out.push(px);
            }
        }
        ColorImage::new(width, height, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_depth() {
        assert!(DepthMap::new(2, 1, vec![1.0, -0.5], DepthKind::Metric).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f64::NAN], DepthKind::Metric).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0], DepthKind::Metric).is_err());
    }

    #[test]
    fn resize_of_constant_image_is_constant() {
        let img = ColorImage::filled(17, 9, [0.25, 0.5, 1.0]);
        let r = img.resize_bilinear(230, 230).unwrap();
        assert!(r.pixels().iter().all(|p| *p == [0.25, 0.5, 1.0]));
    }

    #[test]
    fn depth_kind_parses() {
        assert_eq!("metric".parse::<DepthKind>().unwrap(), DepthKind::Metric);
        assert_eq!("inverse".parse::<DepthKind>().unwrap(), DepthKind::Inverse);
        assert!("meters".parse::<DepthKind>().is_err());
    }
}
