use ndarray::NdFloat;

use super::{GradientSet, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub velocity: ParameterSet<T>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl<T: NdFloat> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            step: 0,
        }
    }
}

/// `v ← m·v + g + λ·p;  p ← p − lr·v`. Parameters without a gradient entry
/// are treated as having a zero gradient.
pub fn sgd_momentum_step<T: NdFloat>(
    params: &mut ParameterSet<T>,
    grads: &GradientSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        match params.get(name) {
            Some(p) if p.dim() == g.dim() => {}
            Some(p) => {
                return Err(Error::invalid(format!(
                    "gradient {name} is {:?} but parameter is {:?}",
                    g.dim(),
                    p.dim()
                )))
            }
            None => return Err(Error::invalid(format!("gradient for unknown parameter {name}"))),
        }
    }
    let (lr, m, wd) = (
        T::from(lr).unwrap(),
        T::from(momentum).unwrap(),
        T::from(weight_decay).unwrap(),
    );
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let p = params.get_mut(&name).expect("listed name");
        if !state.velocity.contains(&name) {
            state
                .velocity
                .insert(name.clone(), ndarray::Array2::zeros(p.dim()));
        }
        let v = state.velocity.get_mut(&name).expect("just inserted");
        if v.dim() != p.dim() {
            return Err(Error::invalid(format!("velocity {name} has the wrong shape")));
        }
        match grads.get(&name) {
            Some(g) => ndarray::Zip::from(&mut *v)
                .and(g)
                .and(&*p)
                .for_each(|v, &g, &p| *v = m * *v + g + wd * p),
            None => ndarray::Zip::from(&mut *v)
                .and(&*p)
                .for_each(|v, &p| *v = m * *v + wd * p),
        }
        p.scaled_add(-lr, v);
    }
    state.step += 1;
    Ok(())
}

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
