//! Target branch: fixed sinusoidal position grids, their 1D and learnable
//! variants, single-convolution locality maps over color or depth, and
//! bilinear sampling of any grid at a source pixel.

use std::borrow::Cow;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthKind, DepthMap};

pub const PE_BASE: f64 = 10_000.0;
pub const DEFAULT_GRID: usize = 7;

pub const CONV_KERNEL: usize = 38;
pub const CONV_STRIDE: usize = 32;
/// Input side length that makes kernel 38 / stride 32 tile to exactly 7×7.
pub const CONV_INPUT: usize = 230;
pub const CONV_CHANNELS: usize = 3;

/// Grid of `d`-dimensional vectors indexed by integer cell `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    grid_x: usize,
    grid_y: usize,
    dim: usize,
    values: Vec<f64>,
}

/// Constant 2D (or 1D) sinusoidal grid.
pub type PositionalEncodingMap = TargetGrid;

impl TargetGrid {
    pub fn new(grid_x: usize, grid_y: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if grid_x == 0 || grid_y == 0 || dim == 0 || values.len() != grid_x * grid_y * dim {
            return Err(Error::invalid(format!(
                "grid {grid_x}x{grid_y}x{dim} does not match {} values",
                values.len()
            )));
        }
        Ok(TargetGrid {
            grid_x,
            grid_y,
            dim,
            values,
        })
    }

    pub fn grid_x(&self) -> usize {
        self.grid_x
    }

    pub fn grid_y(&self) -> usize {
        self.grid_y
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid_x * self.grid_y
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Vector of cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        self.cell_by_id(y * self.grid_x + x)
    }

    /// Vector of the cell with row-major id `y * grid_x + x`.
    pub fn cell_by_id(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    /// `cells × dim` matrix view.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.cells(), self.dim), &self.values).expect("shape checked in new")
    }
}

fn check_dim(d_model: usize) -> Result<()> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "d_model must be a positive multiple of 4, got {d_model}"
        )));
    }
    Ok(())
}

/// 2D sinusoidal encoding: the first half of the dimensions encodes `x` as
/// interleaved sin/cos pairs with frequencies `10000^(-4i/d)`, the second
/// half encodes `y` the same way.
pub fn positional_encoding_2d(x: f64, y: f64, d_model: usize) -> Result<Vec<f64>> {
    check_dim(d_model)?;
    let half = d_model / 2;
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 4 {
        let freq = PE_BASE.powf(-(4.0 * i as f64) / d_model as f64);
        out[2 * i] = (x * freq).sin();
        out[2 * i + 1] = (x * freq).cos();
        out[half + 2 * i] = (y * freq).sin();
        out[half + 2 * i + 1] = (y * freq).cos();
    }
    Ok(out)
}

/// 1D ablation variant: a standard 1D sinusoidal encoding of `y` over all
/// `d_model` dimensions, constant along `x`.
pub fn positional_encoding_1d_variant(x: f64, y: f64, d_model: usize) -> Result<Vec<f64>> {
    let _ = x;
    check_dim(d_model)?;
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let freq = PE_BASE.powf(-(2.0 * i as f64) / d_model as f64);
        out[2 * i] = (y * freq).sin();
        out[2 * i + 1] = (y * freq).cos();
    }
    Ok(out)
}

fn build_grid(
    grid_x: usize,
    grid_y: usize,
    d_model: usize,
    pe: fn(f64, f64, usize) -> Result<Vec<f64>>,
) -> Result<TargetGrid> {
    if grid_x < 2 || grid_y < 2 {
        return Err(Error::invalid(format!(
            "grid must be at least 2x2, got {grid_x}x{grid_y}"
        )));
    }
    let mut values = Vec::with_capacity(grid_x * grid_y * d_model);
    for y in 0..grid_y {
        for x in 0..grid_x {
            values.extend(pe(x as f64, y as f64, d_model)?);
        }
    }
    TargetGrid::new(grid_x, grid_y, d_model, values)
}

pub fn build_pe_map(grid_x: usize, grid_y: usize, d_model: usize) -> Result<PositionalEncodingMap> {
    build_grid(grid_x, grid_y, d_model, positional_encoding_2d)
}

pub fn build_pe1d_map(grid_x: usize, grid_y: usize, d_model: usize) -> Result<PositionalEncodingMap> {
    build_grid(grid_x, grid_y, d_model, positional_encoding_1d_variant)
}

/// Continuous grid coordinates of a source pixel: pixel 0 maps to cell 0 and
/// the last pixel to the last cell. Out-of-range input is clamped.
pub fn grid_coords(uv: [f64; 2], image_size: (usize, usize), grid_x: usize, grid_y: usize) -> [f64; 2] {
    let map = |p: f64, size: usize, cells: usize| {
        if size <= 1 || cells <= 1 {
            return 0.0;
        }
        (p / (size - 1) as f64 * (cells - 1) as f64).clamp(0.0, (cells - 1) as f64)
    };
    [map(uv[0], image_size.0, grid_x), map(uv[1], image_size.1, grid_y)]
}

/// Id of the grid cell nearest to a source pixel.
pub fn nearest_cell(uv: [f64; 2], image_size: (usize, usize), grid_x: usize, grid_y: usize) -> usize {
    let [gx, gy] = grid_coords(uv, image_size, grid_x, grid_y);
    let x = (gx.round() as usize).min(grid_x - 1);
    let y = (gy.round() as usize).min(grid_y - 1);
    y * grid_x + x
}

/// The four cells surrounding a continuous grid coordinate and their
/// bilinear weights. Weights sum to one.
pub fn bilinear_weights(coords: [f64; 2], grid_x: usize, grid_y: usize) -> [(usize, f64); 4] {
    let split = |c: f64, cells: usize| {
        if cells < 2 {
            return (0usize, 0usize, 0.0);
        }
        let lo = (c.floor().max(0.0) as usize).min(cells - 2);
        (lo, lo + 1, c - lo as f64)
    };
    let (x0, x1, tx) = split(coords[0], grid_x);
    let (y0, y1, ty) = split(coords[1], grid_y);
    [
        (y0 * grid_x + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * grid_x + x1, tx * (1.0 - ty)),
        (y1 * grid_x + x0, (1.0 - tx) * ty),
        (y1 * grid_x + x1, tx * ty),
    ]
}

/// Bilinear blend of the grid at a source pixel.
pub fn sample_grid(grid: &TargetGrid, uv: [f64; 2], image_size: (usize, usize)) -> Vec<f64> {
    let w = bilinear_weights(
        grid_coords(uv, image_size, grid.grid_x, grid.grid_y),
        grid.grid_x,
        grid.grid_y,
    );
    let mut out = vec![0.0; grid.dim];
    for (cell, weight) in w {
        if weight == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(grid.cell_by_id(cell)) {
            *o += weight * v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInput {
    Color,
    Depth,
}

/// Frozen, randomly initialized single convolution producing a 7×7 map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLocalityTarget {
    input: ConvInput,
    d_model: usize,
    /// `d_model × (kernel² · channels)`, patch layout `(dy, dx, channel)`.
    weights: Array2<f64>,
    bias: Vec<f64>,
}

impl ConvLocalityTarget {
    pub fn new(input: ConvInput, d_model: usize, seed: u64) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::invalid("d_model must be positive"));
        }
        let fan_in = CONV_KERNEL * CONV_KERNEL * CONV_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let weights = Array2::from_shape_fn((d_model, fan_in), |_| normal.sample(&mut rng));
        let bias = (0..d_model).map(|_| 0.1 * normal.sample(&mut rng)).collect();
        Ok(ConvLocalityTarget {
            input,
            d_model,
            weights,
            bias,
        })
    }

    /// Builds from explicit weights (`d_model × kernel²·channels`) and bias.
    pub fn from_weights(input: ConvInput, weights: Array2<f64>, bias: Vec<f64>) -> Result<Self> {
        let fan_in = CONV_KERNEL * CONV_KERNEL * CONV_CHANNELS;
        if weights.ncols() != fan_in || weights.nrows() != bias.len() || bias.is_empty() {
            return Err(Error::invalid(
                "conv weights must be d_model x (38*38*3) with matching bias",
            ));
        }
        Ok(ConvLocalityTarget {
            input,
            d_model: bias.len(),
            weights,
            bias,
        })
    }

    pub fn input(&self) -> ConvInput {
        self.input
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Output side length for a square input of side `n`.
    pub fn output_size(n: usize) -> usize {
        if n < CONV_KERNEL {
            0
        } else {
            (n - CONV_KERNEL) / CONV_STRIDE + 1
        }
    }

    /// Applies the convolution to a 230×230 image.
    pub fn forward(&self, image: &ColorImage) -> Result<TargetGrid> {
        if image.width() != CONV_INPUT || image.height() != CONV_INPUT {
            return Err(Error::invalid(format!(
                "conv locality input must be {CONV_INPUT}x{CONV_INPUT}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let out = Self::output_size(CONV_INPUT);
        let fan_in = CONV_KERNEL * CONV_KERNEL * CONV_CHANNELS;
        // im2col: one row per output cell
        let mut cols = Array2::<f64>::zeros((out * out, fan_in));
        for oy in 0..out {
            for ox in 0..out {
                let mut row = cols.row_mut(oy * out + ox);
                let mut idx = 0;
                for dy in 0..CONV_KERNEL {
                    for dx in 0..CONV_KERNEL {
                        let px = image.get(ox * CONV_STRIDE + dx, oy * CONV_STRIDE + dy);
                        for c in px {
                            row[idx] = c as f64;
                            idx += 1;
                        }
                    }
                }
            }
        }
        let mut map = cols.dot(&self.weights.t());
        for mut row in map.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        TargetGrid::new(out, out, self.d_model, map.into_raw_vec_and_offset().0)
    }
}

/// Convenience wrapper: resizes and applies the convolution.
pub fn conv_locality_forward(image: &ColorImage, target: &ConvLocalityTarget) -> Result<TargetGrid> {
    target.forward(image)
}

/// Piecewise-linear blue → green → red colormap over `[0, 1]`.
pub fn colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        let s = (t / 0.5) as f32;
        [0.0, s, 1.0 - s]
    } else {
        let s = ((t - 0.5) / 0.5) as f32;
        [s, 1.0 - s, 0.0]
    }
}

/// Per-frame min–max normalized depth through [`colormap`]. A constant map
/// renders entirely at the colormap midpoint.
pub fn depth_to_heatmap(depth: &DepthMap) -> Result<ColorImage> {
    if depth.kind() != DepthKind::Metric {
        return Err(Error::invalid("heatmaps are drawn from metric depth"));
    }
    let (lo, hi) = depth
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let pixels = depth
        .values()
        .iter()
        .map(|&v| colormap(if span > 0.0 { (v - lo) / span } else { 0.5 }))
        .collect();
    ColorImage::new(depth.width(), depth.height(), pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetVariant {
    Pe2d,
    Pe1d,
    Learnable,
    ConvColor,
    ConvDepth,
}

impl TargetVariant {
    pub const ALL: [TargetVariant; 5] = [
        TargetVariant::Pe2d,
        TargetVariant::Pe1d,
        TargetVariant::Learnable,
        TargetVariant::ConvColor,
        TargetVariant::ConvDepth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetVariant::Pe2d => "pe2d",
            TargetVariant::Pe1d => "pe1d",
            TargetVariant::Learnable => "learnable",
            TargetVariant::ConvColor => "conv_color",
            TargetVariant::ConvDepth => "conv_depth",
        }
    }
}

impl FromStr for TargetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown target variant {s:?}")))
    }
}

/// Source of per-point target vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetProvider {
    Pe2d(TargetGrid),
    Pe1d(TargetGrid),
    /// Initial value of a trainable grid; the live values are model
    /// parameters.
    Learnable(TargetGrid),
    Conv(ConvLocalityTarget),
}

impl TargetProvider {
    /// `grid` is the side length for the position variants; conv variants
    /// always produce 7×7.
    pub fn new(variant: TargetVariant, grid: usize, d_model: usize, seed: u64) -> Result<Self> {
        Ok(match variant {
            TargetVariant::Pe2d => TargetProvider::Pe2d(build_pe_map(grid, grid, d_model)?),
            TargetVariant::Pe1d => TargetProvider::Pe1d(build_pe1d_map(grid, grid, d_model)?),
            TargetVariant::Learnable => TargetProvider::Learnable(build_pe_map(grid, grid, d_model)?),
            TargetVariant::ConvColor => {
                TargetProvider::Conv(ConvLocalityTarget::new(ConvInput::Color, d_model, seed)?)
            }
            TargetVariant::ConvDepth => {
                TargetProvider::Conv(ConvLocalityTarget::new(ConvInput::Depth, d_model, seed)?)
            }
        })
    }

    pub fn variant(&self) -> TargetVariant {
        match self {
            TargetProvider::Pe2d(_) => TargetVariant::Pe2d,
            TargetProvider::Pe1d(_) => TargetVariant::Pe1d,
            TargetProvider::Learnable(_) => TargetVariant::Learnable,
            TargetProvider::Conv(c) => match c.input() {
                ConvInput::Color => TargetVariant::ConvColor,
                ConvInput::Depth => TargetVariant::ConvDepth,
            },
        }
    }

    /// True when the grid does not depend on the frame.
    pub fn is_constant(&self) -> bool {
        !matches!(self, TargetProvider::Conv(_))
    }

    pub fn d_model(&self) -> usize {
        match self {
            TargetProvider::Pe2d(g) | TargetProvider::Pe1d(g) | TargetProvider::Learnable(g) => g.dim(),
            TargetProvider::Conv(c) => c.d_model(),
        }
    }

    /// Grid side lengths `(x, y)`.
    pub fn grid_size(&self) -> (usize, usize) {
        match self {
            TargetProvider::Pe2d(g) | TargetProvider::Pe1d(g) | TargetProvider::Learnable(g) => {
                (g.grid_x(), g.grid_y())
            }
            TargetProvider::Conv(_) => {
                let n = ConvLocalityTarget::output_size(CONV_INPUT);
                (n, n)
            }
        }
    }

    /// The constant grid, if this provider has one.
    pub fn constant_grid(&self) -> Option<&TargetGrid> {
        match self {
            TargetProvider::Pe2d(g) | TargetProvider::Pe1d(g) | TargetProvider::Learnable(g) => Some(g),
            TargetProvider::Conv(_) => None,
        }
    }

    /// Target grid for one frame.
    pub fn grid_for(&self, depth: &DepthMap, color: Option<&ColorImage>) -> Result<Cow<'_, TargetGrid>> {
        match self {
            TargetProvider::Pe2d(g) | TargetProvider::Pe1d(g) | TargetProvider::Learnable(g) => {
                Ok(Cow::Borrowed(g))
            }
            TargetProvider::Conv(conv) => {
                let image = match conv.input() {
                    ConvInput::Color => color
                        .ok_or_else(|| Error::invalid("conv_color targets need a color image"))?
                        .clone(),
                    ConvInput::Depth => depth_to_heatmap(depth)?,
                };
                let resized = image.resize_bilinear(CONV_INPUT, CONV_INPUT)?;
                Ok(Cow::Owned(conv.forward(&resized)?))
            }
        }
    }
}

/// Samples a provider's grid at a source pixel.
pub fn sample_target(grid: &TargetGrid, uv: [f64; 2], image_size: (usize, usize)) -> Vec<f64> {
    sample_grid(grid, uv, image_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn sq_norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (sq_norm(a).sqrt() * sq_norm(b).sqrt())
    }

    #[test]
    fn origin_encodes_to_sin0_cos1() {
        for d in [4, 8, 64] {
            let v = positional_encoding_2d(0.0, 0.0, d).unwrap();
            for (i, x) in v.iter().enumerate() {
                assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn hand_evaluated_d4() {
        let v = positional_encoding_2d(1.0, 0.0, 4).unwrap();
        let expect = [0.8414709848078965, 0.5403023058681398, 0.0, 1.0];
        for (a, b) in v.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn second_frequency_for_d8() {
        // i = 1: 10000^(-4/8) = 0.01
        let v = positional_encoding_2d(3.0, 5.0, 8).unwrap();
        assert_abs_diff_eq!(v[2], (0.03f64).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], (0.03f64).cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[4], (5.0f64).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[7], (0.05f64).cos(), epsilon = 1e-15);
    }

    #[test]
    fn bad_dims_rejected() {
        for d in [0, 2, 6, 7, 10] {
            assert!(positional_encoding_2d(0.0, 0.0, d).is_err(), "d={d}");
            assert!(positional_encoding_1d_variant(0.0, 0.0, d).is_err());
        }
        assert!(build_pe_map(1, 7, 64).is_err());
    }

    #[test]
    fn norms_are_half_dim() {
        let mut rng = rand::rng();
        for _ in 0..100 {
            let (x, y) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            assert_abs_diff_eq!(
                sq_norm(&positional_encoding_2d(x, y, 64).unwrap()),
                32.0,
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                sq_norm(&positional_encoding_1d_variant(x, y, 64).unwrap()),
                32.0,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn pe_map_7x7_is_injective_and_constant() {
        let m = build_pe_map(7, 7, 64).unwrap();
        assert_eq!(m.cells(), 49);
        for a in 0..49 {
            for b in a + 1..49 {
                assert_ne!(m.cell_by_id(a), m.cell_by_id(b));
            }
        }
        assert_eq!(m, build_pe_map(7, 7, 64).unwrap());
        assert!(cosine(m.cell(0, 0), m.cell(6, 6)) < cosine(m.cell(0, 0), m.cell(0, 1)));
    }

    #[test]
    fn one_d_variant_ignores_x() {
        assert_eq!(
            positional_encoding_1d_variant(0.0, 3.0, 64).unwrap(),
            positional_encoding_1d_variant(5.0, 3.0, 64).unwrap()
        );
        assert_ne!(
            positional_encoding_2d(0.0, 3.0, 64).unwrap(),
            positional_encoding_2d(5.0, 3.0, 64).unwrap()
        );
    }

    #[test]
    fn sampling_hits_lattice_exactly() {
        let m = build_pe_map(7, 7, 16).unwrap();
        let size = (61, 31); // cell spacing 10 px horizontally, 5 px vertically
        for y in 0..7 {
            for x in 0..7 {
                let v = sample_grid(&m, [10.0 * x as f64, 5.0 * y as f64], size);
                assert_eq!(v.as_slice(), m.cell(x, y));
            }
        }
    }

    #[test]
    fn midpoint_is_mean_of_neighbours() {
        let m = build_pe_map(7, 7, 16).unwrap();
        let v = sample_grid(&m, [25.0, 10.0], (61, 31));
        for (i, x) in v.iter().enumerate() {
            assert_abs_diff_eq!(*x, 0.5 * (m.cell(2, 2)[i] + m.cell(3, 2)[i]), epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_clamps_to_corner() {
        let m = build_pe_map(7, 7, 16).unwrap();
        assert_eq!(sample_grid(&m, [60.0, 30.0], (61, 31)).as_slice(), m.cell(6, 6));
        assert_eq!(sample_grid(&m, [-3.0, 1e6], (61, 31)).as_slice(), m.cell(0, 6));
    }

    #[test]
    fn bilinear_is_linear_along_a_row() {
        let m = build_pe_map(7, 7, 8).unwrap();
        let size = (61, 31);
        let (u1, u2) = (21.0, 29.0);
        let s1 = sample_grid(&m, [u1, 7.0], size);
        let s2 = sample_grid(&m, [u2, 7.0], size);
        for alpha in [0.0, 0.25, 0.6, 1.0] {
            let s = sample_grid(&m, [alpha * u1 + (1.0 - alpha) * u2, 7.0], size);
            for i in 0..8 {
                assert_abs_diff_eq!(s[i], alpha * s1[i] + (1.0 - alpha) * s2[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nearest_cell_rounds() {
        assert_eq!(nearest_cell([0.0, 0.0], (61, 31), 7, 7), 0);
        assert_eq!(nearest_cell([14.9, 2.4], (61, 31), 7, 7), 1);
        assert_eq!(nearest_cell([15.1, 2.6], (61, 31), 7, 7), 7 + 2);
        assert_eq!(nearest_cell([60.0, 30.0], (61, 31), 7, 7), 48);
    }

    #[test]
    fn conv_output_size_arithmetic() {
        assert_eq!(ConvLocalityTarget::output_size(230), 7);
        let t = ConvLocalityTarget::new(ConvInput::Color, 8, 1).unwrap();
        let g = t.forward(&ColorImage::filled(230, 230, [0.3, 0.1, 0.9])).unwrap();
        assert_eq!((g.grid_x(), g.grid_y(), g.dim()), (7, 7, 8));
        assert!(t.forward(&ColorImage::filled(229, 230, [0.0; 3])).is_err());
    }

    #[test]
    fn conv_zero_image_zero_bias_is_zero() {
        let t = ConvLocalityTarget::new(ConvInput::Color, 4, 1).unwrap();
        let z =
            ConvLocalityTarget::from_weights(ConvInput::Color, t.weights().clone(), vec![0.0; 4]).unwrap();
        let g = z.forward(&ColorImage::filled(230, 230, [0.0; 3])).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_is_seed_deterministic() {
        let a = ConvLocalityTarget::new(ConvInput::Depth, 8, 42).unwrap();
        let b = ConvLocalityTarget::new(ConvInput::Depth, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ConvLocalityTarget::new(ConvInput::Depth, 8, 43).unwrap());
    }

    #[test]
    fn heatmap_endpoints_and_constant() {
        let d = DepthMap::new(3, 1, vec![1.0, 2.0, 5.0], DepthKind::Metric).unwrap();
        let h = depth_to_heatmap(&d).unwrap();
        assert_eq!(h.get(0, 0), [0.0, 0.0, 1.0]);
        assert_eq!(h.get(2, 0), [1.0, 0.0, 0.0]);
        let c = DepthMap::new(2, 2, vec![3.0; 4], DepthKind::Metric).unwrap();
        let h = depth_to_heatmap(&c).unwrap();
        assert!(h.pixels().iter().all(|p| *p == colormap(0.5)));
        assert_eq!(colormap(0.5), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn provider_variants_parse_and_build() {
        for v in TargetVariant::ALL {
            assert_eq!(v.as_str().parse::<TargetVariant>().unwrap(), v);
            let p = TargetProvider::new(v, 7, 16, 3).unwrap();
            assert_eq!(p.variant(), v);
            assert_eq!(p.d_model(), 16);
            assert_eq!(p.grid_size(), (7, 7));
        }
        assert!("pe3d".parse::<TargetVariant>().is_err());
    }

    #[test]
    fn conv_color_needs_color() {
        let p = TargetProvider::new(TargetVariant::ConvColor, 7, 8, 0).unwrap();
        let d = DepthMap::new(4, 4, vec![1.0; 16], DepthKind::Metric).unwrap();
        assert!(p.grid_for(&d, None).is_err());
        let img = ColorImage::filled(4, 4, [0.5; 3]);
        assert_eq!(p.grid_for(&d, Some(&img)).unwrap().cells(), 49);
    }
}
