use ndarray::{Array2, ArrayView2, NdFloat};

use super::layers::{l2_normalize_rows, mlp_backward, mlp_forward};
use super::{
    EncoderConfig, GradientSet, ModelConfig, ParameterSet, COLOR_HEAD_PREFIX, EMBEDDING_NAME, ENCODER_PREFIX,
    HEAD_LAYERS, ONLINE_HEAD_PREFIX,
};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, Objective};
use crate::pcd::{NeighborTable, PointCloud};

/// Which projection head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Online,
    Target,
}

/// Rotation about +z that turns the mean horizontal direction of the cloud
/// (seen from the origin) onto +y, as `(cos, sin)`. Identity when the mean
/// is too close to the origin to define a direction.
pub fn canonical_yaw(positions: &[[f64; 3]]) -> (f64, f64) {
    let n = positions.len().max(1) as f64;
    let mx = positions.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = positions.iter().map(|p| p[1]).sum::<f64>() / n;
    let r = mx.hypot(my);
    if r < 1e-9 {
        return (1.0, 0.0);
    }
    // rotate (mx, my) to (0, r): angle = π/2 − atan2(my, mx)
    (my / r, mx / r)
}

/// Per-point encoder input rows: `[p − centroid(kNN(p)), p, color?]`, with
/// positions expressed in the canonical yaw frame when enabled.
pub fn encoder_input<T: NdFloat>(
    positions: &[[f64; 3]],
    colors: Option<&[[f32; 3]]>,
    neighbors: &NeighborTable,
    cfg: &EncoderConfig,
) -> Result<Array2<T>> {
    let n = positions.len();
    if neighbors.len() != n {
        return Err(Error::invalid(format!(
            "neighbor table has {} rows for {n} points",
            neighbors.len()
        )));
    }
    let colors = match (cfg.use_color, colors) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(Error::invalid("encoder expects colors but the cloud has none")),
        (false, _) => None,
    };
    let (c, s) = if cfg.canonical_yaw {
        canonical_yaw(positions)
    } else {
        (1.0, 0.0)
    };
    let rot = |v: [f64; 3]| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
    let mut x = Array2::zeros((n, cfg.input_channels()));
    let kf = neighbors.k as f64;
    for (i, p) in positions.iter().enumerate() {
        let mut m = [0.0; 3];
        for &j in neighbors.row(i) {
            for a in 0..3 {
                m[a] += positions[j][a];
            }
        }
        let off = rot([p[0] - m[0] / kf, p[1] - m[1] / kf, p[2] - m[2] / kf]);
        let pr = rot(*p);
        for a in 0..3 {
            x[[i, a]] = T::from(off[a]).unwrap();
            x[[i, 3 + a]] = T::from(pr[a]).unwrap();
        }
        if let Some(cols) = colors {
            for a in 0..3 {
                x[[i, 6 + a]] = T::from(cols[i][a]).unwrap();
            }
        }
    }
    Ok(x)
}

/// Shared per-point MLP over [`encoder_input`] rows → `N × D` features.
pub fn encode_points<T: NdFloat>(
    cloud: &PointCloud,
    neighbors: &NeighborTable,
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    let x = encoder_input(cloud.positions(), cloud.colors(), neighbors, &cfg.encoder)?;
    Ok(mlp_forward(params, ENCODER_PREFIX, cfg.encoder_layers(), x, false)?.0)
}

/// Two-layer head with unit-norm output rows.
pub fn project_head<T: NdFloat>(
    features: ArrayView2<T>,
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    which: HeadKind,
) -> Result<Array2<T>> {
    let prefix = match which {
        HeadKind::Online => ONLINE_HEAD_PREFIX,
        HeadKind::Target => cfg.target_head_prefix(),
    };
    let (h, _) = mlp_forward(params, prefix, HEAD_LAYERS, features.to_owned(), false)?;
    Ok(l2_normalize_rows(h.view()).y)
}

/// Online branch from raw encoder input rows: encoder → head → normalize.
pub fn online_embed<T: NdFloat>(
    x: Array2<T>,
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    let (f, _) = mlp_forward(params, ENCODER_PREFIX, cfg.encoder_layers(), x, false)?;
    project_head(f.view(), params, cfg, HeadKind::Online)
}

/// Target branch from raw target vectors.
pub fn target_embed<T: NdFloat>(
    targets: ArrayView2<T>,
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    project_head(targets, params, cfg, HeadKind::Target)
}

/// Everything one scene contributes to a training step.
#[derive(Debug, Clone)]
pub struct SceneInputs<T> {
    /// `N × in` encoder input rows.
    pub encoder_input: Array2<T>,
    /// `N × d` sampled target vectors (constant-grid providers).
    pub targets: Option<Array2<T>>,
    /// `N × cells` bilinear sampling weights into the trainable grid.
    pub target_weights: Option<Array2<T>>,
    /// Nearest cell of every point.
    pub labels: Vec<usize>,
    /// `cells × d` grid vectors, needed for position classification with a
    /// constant grid.
    pub cell_vectors: Option<Array2<T>>,
    /// Pre-augmentation colors and which rows were masked.
    pub color_target: Option<(Array2<T>, Vec<bool>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOutput {
    pub loss: f64,
    pub main_loss: f64,
    pub color_loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
}

/// Forward pass of one scene and, when `want_grad`, the exact gradient of
/// its total loss with respect to every parameter (unused ones get zeros).
pub fn scene_loss<T: NdFloat>(
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    params: &ParameterSet<T>,
    inputs: &SceneInputs<T>,
    want_grad: bool,
) -> Result<(SceneOutput, Option<GradientSet<T>>)> {
    let n = inputs.encoder_input.nrows();
    let learnable = params.contains(EMBEDDING_NAME);
    let tau = T::from(loss_cfg.tau).unwrap();
    let inv_tau = T::one() / tau;
    let thead = cfg.target_head_prefix();

    // online branch
    let (feat, enc_cache) = mlp_forward(
        params,
        ENCODER_PREFIX,
        cfg.encoder_layers(),
        inputs.encoder_input.clone(),
        false,
    )?;
    let (hq, head_cache) = mlp_forward(params, ONLINE_HEAD_PREFIX, HEAD_LAYERS, feat.clone(), false)?;
    let qn = l2_normalize_rows(hq.view());

    // target branch
    let target_rows = if learnable {
        let w = inputs
            .target_weights
            .as_ref()
            .ok_or_else(|| Error::invalid("trainable targets need sampling weights"))?;
        w.dot(params.require(EMBEDDING_NAME)?)
    } else {
        inputs
            .targets
            .clone()
            .ok_or_else(|| Error::invalid("scene has no target vectors"))?
    };
    if target_rows.nrows() != n {
        return Err(Error::invalid(format!(
            "{} target rows for {n} points",
            target_rows.nrows()
        )));
    }
    let (hk, tk_cache) = mlp_forward(params, thead, HEAD_LAYERS, target_rows, false)?;
    let kn = l2_normalize_rows(hk.view());
    let (pos_sim, neg_sim) = loss::pair_similarities(qn.y.view(), kn.y.view());

    let mut grads = want_grad.then(|| params.zeros_like());
    let main_loss;
    let d_q;
    match loss_cfg.objective {
        Objective::InfoNce => {
            let pl = loss::info_nce(qn.y.view(), kn.y.view(), tau)?;
            main_loss = pl.loss;
            d_q = pl.d_q;
            if let Some(g) = grads.as_mut() {
                let dhk = kn.backward(pl.d_k.view());
                let dt = mlp_backward(params, thead, &tk_cache, dhk, g, learnable)?;
                if let (Some(dt), Some(w)) = (dt, inputs.target_weights.as_ref()) {
                    g.accumulate(EMBEDDING_NAME, &w.t().dot(&dt));
                }
            }
        }
        Objective::PositionClassification => {
            let cells = if learnable {
                params.require(EMBEDDING_NAME)?.clone()
            } else {
                inputs
                    .cell_vectors
                    .clone()
                    .ok_or_else(|| Error::invalid("position classification needs grid cell vectors"))?
            };
            let (hc, cell_cache) = mlp_forward(params, thead, HEAD_LAYERS, cells, false)?;
            let cn = l2_normalize_rows(hc.view());
            let logits = qn.y.dot(&cn.y.t()).mapv(|v| v * inv_tau);
            let (l, dlogits) = loss::position_classification_loss(logits.view(), &inputs.labels)?;
            main_loss = l;
            d_q = dlogits.dot(&cn.y).mapv(|v| v * inv_tau);
            if let Some(g) = grads.as_mut() {
                let dcn = dlogits.t().dot(&qn.y).mapv(|v| v * inv_tau);
                let dhc = cn.backward(dcn.view());
                if let Some(dcells) = mlp_backward(params, thead, &cell_cache, dhc, g, learnable)? {
                    g.accumulate(EMBEDDING_NAME, &dcells);
                }
            }
        }
    }

    let mut color_loss = T::zero();
    let mut d_feat_color = None;
    let w_color = T::from(loss_cfg.color_loss_weight).unwrap();
    if loss_cfg.color_loss_weight > 0.0 && cfg.color_head {
        if let Some((target, mask)) = inputs.color_target.as_ref() {
            let wc = params.require(&format!("{COLOR_HEAD_PREFIX}.0.w"))?;
            let bc = params.require(&format!("{COLOR_HEAD_PREFIX}.0.b"))?;
            let pred = feat.dot(wc) + bc;
            let (l, dpred) = loss::color_reconstruction_loss(pred.view(), target.view(), mask)?;
            color_loss = l;
            if let Some(g) = grads.as_mut() {
                let dpred = dpred.mapv(|v| v * w_color);
                g.accumulate(&format!("{COLOR_HEAD_PREFIX}.0.w"), &feat.t().dot(&dpred));
                g.accumulate(
                    &format!("{COLOR_HEAD_PREFIX}.0.b"),
                    &dpred.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)),
                );
                d_feat_color = Some(dpred.dot(&wc.t()));
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        let dhq = qn.backward(d_q.view());
        let mut dfeat = mlp_backward(params, ONLINE_HEAD_PREFIX, &head_cache, dhq, g, true)?
            .expect("input gradient requested");
        if let Some(dc) = d_feat_color {
            dfeat += &dc;
        }
        mlp_backward(params, ENCODER_PREFIX, &enc_cache, dfeat, g, false)?;
    }
    let main = main_loss.to_f64().unwrap();
    let color = color_loss.to_f64().unwrap();
    Ok((
        SceneOutput {
            loss: main + loss_cfg.color_loss_weight * color,
            main_loss: main,
            color_loss: color,
            pos_sim,
            neg_sim,
        },
        grads,
    ))
}
