use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scene_loss, ModelConfig, ParameterSet, SceneInputs};
use crate::error::Result;
use crate::loss::LossConfig;

/// Absolute floor in the relative-error denominator, so coordinates whose
/// true gradient is ~0 are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(parameter, row, col, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, usize, f64, f64)>,
}

/// Compares analytic gradients of [`scene_loss`] with central differences at
/// `probes` uniformly drawn scalar coordinates.
pub fn gradient_check(
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    params: &ParameterSet<f64>,
    inputs: &SceneInputs<f64>,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = scene_loss(cfg, loss_cfg, params, inputs, true)?;
    let grads = grads.expect("gradients requested");
    let entries: Vec<(String, usize, usize)> = params
        .iter()
        .map(|(n, a)| (n.to_owned(), a.nrows(), a.ncols()))
        .collect();
    let total = params.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_params = params.clone();
    let mut report = GradCheckReport {
        probes,
        max_rel_error: 0.0,
        worst: None,
    };
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let (name, rows, cols) = entries
            .iter()
            .find(|(_, r, c)| {
                if flat < r * c {
                    true
                } else {
                    flat -= r * c;
                    false
                }
            })
            .expect("index within total");
        let (i, j) = (flat / cols, flat % cols);
        debug_assert!(i < *rows);
        let orig = params.get(name).expect("listed")[[i, j]];
        probe_params.get_mut(name).expect("listed")[[i, j]] = orig + eps;
        let plus = scene_loss(cfg, loss_cfg, &probe_params, inputs, false)?.0.loss;
        probe_params.get_mut(name).expect("listed")[[i, j]] = orig - eps;
        let minus = scene_loss(cfg, loss_cfg, &probe_params, inputs, false)?.0.loss;
        probe_params.get_mut(name).expect("listed")[[i, j]] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(name).expect("full layout")[[i, j]];
        let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((name.clone(), i, j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
