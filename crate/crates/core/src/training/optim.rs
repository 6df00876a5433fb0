use std::collections::BTreeMap;

use crate::arch::ParamStore;
use crate::error::{Result, StoicError};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    pub guidance_training: bool,
    /// Save a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
            steps: 1000,
            cond_dropout: 0.1,
            seed: 0,
            guidance_training: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StoicError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!(
                "cond_dropout must be in [0, 1], got {}",
                self.cond_dropout
            ));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!(
                "adam betas must be in [0, 1), got {:?}",
                self.betas
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// First and second moments per parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<E: Element = f32> {
    pub m: BTreeMap<String, Vec<E>>,
    pub v: BTreeMap<String, Vec<E>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        let zeros = |p: &ParamStore<E>| {
            p.iter()
                .map(|(k, t)| (k.to_string(), vec![E::zero(); t.numel()]))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// Decoupled-weight-decay Adam update with bias correction:
/// `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + eps)`. Arithmetic runs in f64 per element.
pub fn adamw_step<E: Element>(
    params: &ParamStore<E>,
    grads: &BTreeMap<String, Vec<E>>,
    state: &mut AdamState<E>,
    hyper: &TrainHyper,
    step_index: u64,
) -> Result<ParamStore<E>> {
    if step_index == 0 {
        return Err(StoicError::invalid("adamw_step", "step_index starts at 1"));
    }
    let (b1, b2) = hyper.betas;
    let bc1 = 1.0 - b1.powi(step_index as i32);
    let bc2 = 1.0 - b2.powi(step_index as i32);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    let mut out = ParamStore::new();
    for (path, tensor) in params.iter() {
        let n = tensor.numel();
        let g = grads.get(path);
        if let Some(g) = g {
            if g.len() != n {
                return Err(StoicError::shape(
                    "adamw_step",
                    format!("gradient for `{path}` has {} values, expected {n}", g.len()),
                ));
            }
        }
        let m = state
            .m
            .entry(path.to_string())
            .or_insert_with(|| vec![E::zero(); n]);
        let v = state
            .v
            .entry(path.to_string())
            .or_insert_with(|| vec![E::zero(); n]);
        if m.len() != n || v.len() != n {
            return Err(StoicError::shape(
                "adamw_step",
                format!("optimizer state for `{path}` does not match the parameter"),
            ));
        }
        let data: Vec<E> = tensor
            .data()
            .iter()
            .enumerate()
            .map(|(i, &theta)| {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = E::from_f64(mi);
                v[i] = E::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps);
                E::from_f64(theta.as_f64() * decay - hyper.lr * update)
            })
            .collect();
        out.insert(path, Tensor::from_vec(data, tensor.shape())?);
    }
    state.t = step_index;
    Ok(out)
}
