//! RMSprop.

use std::collections::BTreeMap;

use clfseg_core::layers::clamp_sigmas;
use clfseg_core::{ParamStore, Tensor};

use crate::error::{HarnessError, Result};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Running mean of squared gradients, one tensor per parameter name.
pub type RmsState = BTreeMap<String, Tensor>;

/// One update of every parameter that has a gradient:
/// `v = decay*v + (1-decay)*g^2`, `p -= lr*g/(sqrt(v)+eps)`.
/// Fuzzy widths are clamped afterwards.
pub fn rmsprop_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut RmsState,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(HarnessError::GradShape {
                name: name.to_string(),
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        let v = state
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if v.shape() != p.shape() {
            return Err(HarnessError::GradShape {
                name: format!("{name} (optimizer state)"),
                param: p.shape().to_vec(),
                grad: v.shape().to_vec(),
            });
        }
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = decay * *vv + (1.0 - decay) * gv * gv;
            *pv -= lr * gv / (vv.sqrt() + eps);
        }
    }
    clamp_sigmas(params);
    Ok(())
}
