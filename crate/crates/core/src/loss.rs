//! Training objectives. Every loss returns its value together with the
//! gradient with respect to its inputs.

use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis, NdFloat};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Temperature used with voxel backbones; kept for configuration.
pub const VOXEL_TEMPERATURE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    InfoNce,
    PositionClassification,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::InfoNce => "infonce",
            Objective::PositionClassification => "posclass",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Objective::InfoNce),
            "posclass" | "position_classification" => Ok(Objective::PositionClassification),
            other => Err(Error::invalid(format!(
                "unknown objective {other:?} (expected infonce or posclass)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub objective: Objective,
    pub color_loss_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TEMPERATURE,
            objective: Objective::InfoNce,
            color_loss_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(self.color_loss_weight >= 0.0) {
            return Err(Error::invalid("color loss weight must be >= 0"));
        }
        Ok(())
    }
}

/// Value and input gradients of a loss over two row sets.
#[derive(Debug, Clone)]
pub struct PairLoss<T> {
    pub loss: T,
    pub d_q: Array2<T>,
    pub d_k: Array2<T>,
}

/// Row-wise softmax in place; returns each row's log-sum-exp.
fn softmax_rows<T: NdFloat>(logits: &mut Array2<T>) -> Vec<T> {
    let mut lse = Vec::with_capacity(logits.nrows());
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        lse.push(max + sum.ln());
    }
    lse
}

/// InfoNCE over one scene: row `i` of `q` is positive with row `i` of `k`
/// and negative with every other row of `k`.
///
/// `loss = mean_i [ logsumexp_t(⟨q_i, k_t⟩/τ) − ⟨q_i, k_i⟩/τ ]`
pub fn info_nce<T: NdFloat>(q: ArrayView2<T>, k: ArrayView2<T>, tau: T) -> Result<PairLoss<T>> {
    let n = q.nrows();
    if n < 2 {
        return Err(Error::invalid("InfoNCE needs at least two points per scene"));
    }
    if k.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "q is {:?} but k is {:?}",
            q.dim(),
            k.dim()
        )));
    }
    let inv_tau = T::one() / tau;
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|v| v * inv_tau);
    let diag: Vec<T> = (0..n).map(|i| logits[[i, i]]).collect();
    let lse = softmax_rows(&mut logits);
    let nf = T::from(n).unwrap();
    let loss = lse
        .iter()
        .zip(&diag)
        .fold(T::zero(), |acc, (&l, &d)| acc + (l - d))
        / nf;

    // d loss / d logits = (softmax - I) / n, then chain through the 1/τ scale
    let mut d_logits = logits;
    for i in 0..n {
        d_logits[[i, i]] -= T::one();
    }
    let scale = inv_tau / nf;
    d_logits.mapv_inplace(|v| v * scale);
    let d_q = d_logits.dot(&k);
    let d_k = d_logits.t().dot(&q);
    Ok(PairLoss { loss, d_q, d_k })
}

/// Mean softmax cross-entropy. Returns the loss and `d loss / d logits`.
pub fn position_classification_loss<T: NdFloat>(
    logits: ArrayView2<T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy over zero rows"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    let mut probs = logits.to_owned();
    let lse = softmax_rows(&mut probs);
    let nf = T::from(n).unwrap();
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        loss += lse[i] - logits[[i, l]];
    }
    for (i, &l) in labels.iter().enumerate() {
        probs[[i, l]] -= T::one();
    }
    probs.mapv_inplace(|v| v / nf);
    Ok((loss / nf, probs))
}

/// Mean squared error over masked rows (averaged over rows and channels).
/// An empty mask gives zero loss and zero gradient.
pub fn color_reconstruction_loss<T: NdFloat>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    mask: &[bool],
) -> Result<(T, Array2<T>)> {
    if pred.dim() != target.dim() || mask.len() != pred.nrows() {
        return Err(Error::invalid("color prediction, target, and mask must align"));
    }
    let mut grad = Array2::zeros(pred.dim());
    let rows = mask.iter().filter(|&&m| m).count();
    if rows == 0 {
        return Ok((T::zero(), grad));
    }
    let count = T::from(rows * pred.ncols()).unwrap();
    let mut loss = T::zero();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..pred.ncols() {
            let diff = pred[[i, c]] - target[[i, c]];
            loss += diff * diff;
            grad[[i, c]] = (diff + diff) / count;
        }
    }
    Ok((loss / count, grad))
}

/// Mean cosine over matched rows and over all mismatched pairs, for
/// unit-norm rows. Returns `(positive, negative)`.
pub fn pair_similarities<T: NdFloat>(q: ArrayView2<T>, k: ArrayView2<T>) -> (f64, f64) {
    let n = q.nrows();
    if n == 0 {
        return (0.0, 0.0);
    }
    let pos: f64 = (0..n).map(|i| q.row(i).dot(&k.row(i)).to_f64().unwrap()).sum();
    let qs = q.sum_axis(Axis(0));
    let ks = k.sum_axis(Axis(0));
    let all = qs.dot(&ks).to_f64().unwrap();
    let neg = if n > 1 {
        (all - pos) / (n * (n - 1)) as f64
    } else {
        0.0
    };
    (pos / n as f64, neg)
}
