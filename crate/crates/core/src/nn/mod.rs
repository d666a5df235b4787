//! Minimal numeric core: named parameter arrays, a permutation-equivariant
//! point encoder, MLP projection heads, hand-written reverse-mode gradients,
//! SGD with momentum, and checkpoints.
//!
//! Everything is generic over the float type so the same code trains in
//! `f32` and runs gradient checks in `f64`.

mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod optim;

use std::collections::BTreeMap;

use ndarray::{Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_FLOOR};
pub use layers::{l2_normalize_rows, mlp_backward, mlp_forward, MlpCache, Normalized, NORM_EPS};
pub use model::{
    encode_points, encoder_input, online_embed, project_head, scene_loss, target_embed, HeadKind,
    SceneInputs, SceneOutput,
};
pub use optim::{cosine_lr, sgd_momentum_step, OptimizerState};

/// Named 2-D arrays. Biases are stored as `1 × n` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Array2<T>>,
}

/// Gradients share the parameter layout.
pub type GradientSet<T> = ParameterSet<T>;

impl<T: NdFloat> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.entries.get_mut(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Array2<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    /// Adds `delta` into the entry `name`, creating it as zeros first.
    pub fn accumulate(&mut self, name: &str, delta: &Array2<T>) {
        match self.entries.get_mut(name) {
            Some(a) => *a += delta,
            None => {
                self.entries.insert(name.to_owned(), delta.clone());
            }
        }
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParameterSet<T>, scale: T) {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(a) => a.scaled_add(scale, g),
                None => {
                    self.entries.insert(name.clone(), g.mapv(|v| v * scale));
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.entries.values_mut() {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// True when `other` has exactly the same names and shapes.
    pub fn same_layout<U>(&self, other: &ParameterSet<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }

    pub fn cast<U: NdFloat>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from(x).unwrap())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub use_color: bool,
    /// Express positions in a yaw frame aligned with the cloud's mean
    /// horizontal direction, making the encoder invariant to rotations
    /// about the vertical axis through the origin.
    pub canonical_yaw: bool,
    /// Neighborhood size for the centroid offset.
    pub k: usize,
    pub hidden: Vec<usize>,
    /// Output feature width `D`.
    pub feature_dim: usize,
    /// Projection-head output width `C`.
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            use_color: false,
            canonical_yaw: true,
            k: 16,
            hidden: vec![64, 128],
            feature_dim: 128,
            projection_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// Centroid offset and position, plus color when enabled.
    pub fn input_channels(&self) -> usize {
        if self.use_color {
            9
        } else {
            6
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.feature_dim == 0 || self.projection_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("encoder dimensions and k must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the target vectors fed to the target head.
    pub target_dim: usize,
    /// Use the online head for the target branch as well.
    pub share_target_head: bool,
    /// Add a linear color-prediction head on encoder features.
    pub color_head: bool,
    /// Number of cells in a trainable target grid; 0 disables it.
    pub learnable_cells: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            target_dim: 64,
            share_target_head: false,
            color_head: false,
            learnable_cells: 0,
        }
    }
}

pub const ENCODER_PREFIX: &str = "enc";
pub const ONLINE_HEAD_PREFIX: &str = "head";
pub const TARGET_HEAD_PREFIX: &str = "thead";
pub const COLOR_HEAD_PREFIX: &str = "chead";
pub const EMBEDDING_NAME: &str = "target.embedding";
pub const HEAD_LAYERS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.target_dim == 0 {
            return Err(Error::invalid("target dimension must be positive"));
        }
        if self.share_target_head && self.target_dim != self.encoder.feature_dim {
            return Err(Error::invalid(format!(
                "a shared head needs target_dim ({}) == feature_dim ({})",
                self.target_dim, self.encoder.feature_dim
            )));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder.hidden.len() + 1
    }

    pub fn target_head_prefix(&self) -> &'static str {
        if self.share_target_head {
            ONLINE_HEAD_PREFIX
        } else {
            TARGET_HEAD_PREFIX
        }
    }

    /// `(name, rows, cols)` for every parameter.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut push_mlp = |prefix: &str, dims: &[usize]| {
            for (i, w) in dims.windows(2).enumerate() {
                out.push((format!("{prefix}.{i}.w"), w[0], w[1]));
                out.push((format!("{prefix}.{i}.b"), 1, w[1]));
            }
        };
        let mut enc_dims = vec![self.encoder.input_channels()];
        enc_dims.extend(&self.encoder.hidden);
        enc_dims.push(self.encoder.feature_dim);
        push_mlp(ENCODER_PREFIX, &enc_dims);
        let d = self.encoder.feature_dim;
        push_mlp(ONLINE_HEAD_PREFIX, &[d, d, self.encoder.projection_dim]);
        if !self.share_target_head {
            push_mlp(
                TARGET_HEAD_PREFIX,
                &[self.target_dim, d, self.encoder.projection_dim],
            );
        }
        if self.color_head {
            push_mlp(COLOR_HEAD_PREFIX, &[d, 3]);
        }
        if self.learnable_cells > 0 {
            out.push((EMBEDDING_NAME.to_owned(), self.learnable_cells, self.target_dim));
        }
        out
    }
}

/// He-normal weights, zero biases. The trainable target grid, when present,
/// starts from `embedding` (`cells × target_dim`).
pub fn init_params<T: NdFloat>(
    cfg: &ModelConfig,
    seed: u64,
    embedding: Option<&Array2<f64>>,
) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (name, rows, cols) in cfg.layout() {
        let value = if name == EMBEDDING_NAME {
            let e =
                embedding.ok_or_else(|| Error::invalid("learnable target grid needs an initial value"))?;
            if e.dim() != (rows, cols) {
                return Err(Error::invalid(format!(
                    "initial embedding is {:?}, expected ({rows}, {cols})",
                    e.dim()
                )));
            }
            e.mapv(|v| T::from(v).unwrap())
        } else if name.ends_with(".b") {
            Array2::zeros((rows, cols))
        } else {
            let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| T::from(normal.sample(&mut rng)).unwrap())
        };
        params.insert(name, value);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_expected_entries() {
        let cfg = ModelConfig::default();
        let names: Vec<String> = cfg.layout().into_iter().map(|l| l.0).collect();
        assert!(names.contains(&"enc.0.w".to_owned()));
        assert!(names.contains(&"enc.2.b".to_owned()));
        assert!(names.contains(&"head.1.w".to_owned()));
        assert!(names.contains(&"thead.0.w".to_owned()));
        assert!(!names.iter().any(|n| n.starts_with("chead")));

        let shared = ModelConfig {
            share_target_head: true,
            target_dim: 128,
            ..Default::default()
        };
        assert!(!shared.layout().iter().any(|l| l.0.starts_with("thead")));
        let bad = ModelConfig {
            share_target_head: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a: ParameterSet<f32> = init_params(&cfg, 3, None).unwrap();
        let b: ParameterSet<f32> = init_params(&cfg, 3, None).unwrap();
        let c: ParameterSet<f32> = init_params(&cfg, 4, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get("enc.0.w").unwrap().dim(), (6, 64));
        assert!(a.get("enc.0.b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learnable_needs_initial_value() {
        let cfg = ModelConfig {
            learnable_cells: 49,
            ..Default::default()
        };
        assert!(init_params::<f32>(&cfg, 0, None).is_err());
        let e = Array2::from_elem((49, 64), 0.5);
        let p: ParameterSet<f32> = init_params(&cfg, 0, Some(&e)).unwrap();
        assert_eq!(p.get(EMBEDDING_NAME).unwrap()[[3, 3]], 0.5);
    }

    #[test]
    fn accumulate_and_cast() {
        let mut g = ParameterSet::<f64>::new();
        g.accumulate("a", &Array2::from_elem((1, 2), 1.0));
        g.accumulate("a", &Array2::from_elem((1, 2), 2.0));
        assert_eq!(g.get("a").unwrap()[[0, 1]], 3.0);
        let f: ParameterSet<f32> = g.cast();
        assert!(f.same_layout(&g));
        assert_eq!(f.numel(), 2);
    }
}
