use ndarray::{Array2, ArrayView2, Axis, NdFloat};

use super::ParameterSet;
use crate::error::{Error, Result};

/// Floor on row norms before division.
pub const NORM_EPS: f64 = 1e-8;

/// Activations saved by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    relu_last: bool,
}

/// Runs layers `{prefix}.0 .. {prefix}.{layers-1}` with rectifiers between
/// layers (and after the last one when `relu_last`).
pub fn mlp_forward<T: NdFloat>(
    params: &ParameterSet<T>,
    prefix: &str,
    layers: usize,
    x: Array2<T>,
    relu_last: bool,
) -> Result<(Array2<T>, MlpCache<T>)> {
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(layers),
        pre: Vec::with_capacity(layers),
        relu_last,
    };
    let mut h = x;
    for i in 0..layers {
        let w = params.require(&format!("{prefix}.{i}.w"))?;
        let b = params.require(&format!("{prefix}.{i}.b"))?;
        if h.ncols() != w.nrows() {
            return Err(Error::invalid(format!(
                "{prefix}.{i}: input width {} but weight expects {}",
                h.ncols(),
                w.nrows()
            )));
        }
        let z = h.dot(w) + b;
        let relu = i + 1 < layers || relu_last;
        let a = if relu {
            z.mapv(|v| v.max(T::zero()))
        } else {
            z.clone()
        };
        cache.inputs.push(h);
        cache.pre.push(z);
        h = a;
    }
    Ok((h, cache))
}

/// Backpropagates `d_out` through a cached MLP, accumulating weight and bias
/// gradients into `grads`. Returns the input gradient when `need_input`.
pub fn mlp_backward<T: NdFloat>(
    params: &ParameterSet<T>,
    prefix: &str,
    cache: &MlpCache<T>,
    d_out: Array2<T>,
    grads: &mut ParameterSet<T>,
    need_input: bool,
) -> Result<Option<Array2<T>>> {
    let layers = cache.inputs.len();
    let mut d = d_out;
    for i in (0..layers).rev() {
        let relu = i + 1 < layers || cache.relu_last;
        if relu {
            ndarray::Zip::from(&mut d).and(&cache.pre[i]).for_each(|g, &z| {
                if z <= T::zero() {
                    *g = T::zero();
                }
            });
        }
        let dw = cache.inputs[i].t().dot(&d);
        let db = d.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.accumulate(&format!("{prefix}.{i}.w"), &dw);
        grads.accumulate(&format!("{prefix}.{i}.b"), &db);
        if i > 0 || need_input {
            let w = params.require(&format!("{prefix}.{i}.w"))?;
            d = d.dot(&w.t());
        }
    }
    Ok(need_input.then_some(d))
}

/// Row-wise L2 normalization with the norm floored at [`NORM_EPS`].
#[derive(Debug, Clone)]
pub struct Normalized<T> {
    pub y: Array2<T>,
    norms: Vec<T>,
    floored: Vec<bool>,
}

pub fn l2_normalize_rows<T: NdFloat>(z: ArrayView2<T>) -> Normalized<T> {
    let eps = T::from(NORM_EPS).unwrap();
    let mut y = z.to_owned();
    let mut norms = Vec::with_capacity(z.nrows());
    let mut floored = Vec::with_capacity(z.nrows());
    for mut row in y.rows_mut() {
        let n = row.dot(&row).sqrt();
        let (n, f) = if n > eps { (n, false) } else { (eps, true) };
        row.mapv_inplace(|v| v / n);
        norms.push(n);
        floored.push(f);
    }
    Normalized { y, norms, floored }
}

impl<T: NdFloat> Normalized<T> {
    /// `dz = (dy − y ⟨y, dy⟩) / ‖z‖`, or `dy / ε` on floored rows.
    pub fn backward(&self, dy: ArrayView2<T>) -> Array2<T> {
        let mut dz = dy.to_owned();
        for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
            let n = self.norms[i];
            if self.floored[i] {
                row.mapv_inplace(|v| v / n);
                continue;
            }
            let yrow = self.y.row(i);
            let proj = yrow.dot(&row);
            ndarray::Zip::from(&mut row)
                .and(&yrow)
                .for_each(|g, &yv| *g = (*g - yv * proj) / n);
        }
        dz
    }
}
