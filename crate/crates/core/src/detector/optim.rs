//! Heavy-ball SGD, the slow-moving parameter average, and update scopes.

use serde::{Deserialize, Serialize};

use super::DetectorParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// Which tensors an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScope {
    All,
    /// Only the convolutional backbone; heads stay frozen.
    BackboneOnly,
}

impl UpdateScope {
    pub fn includes(&self, tensor_name: &str) -> bool {
        match self {
            UpdateScope::All => true,
            UpdateScope::BackboneOnly => tensor_name.starts_with("conv"),
        }
    }
}

/// One momentum step: `v = momentum * v + g`, `p -= lr * v`, restricted
/// to tensors within the scope. Velocities outside the scope are left
/// untouched.
pub fn sgd_momentum_step(
    params: &mut DetectorParams,
    velocity: &mut DetectorParams,
    grads: &DetectorParams,
    cfg: &SgdConfig,
    scope: UpdateScope,
) {
    for (((name, p), (_, v)), (_, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        if !scope.includes(name) {
            continue;
        }
        for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.lr * *vv;
        }
    }
}

/// Move the averaged parameters towards the live ones:
/// `t = beta * t + (1 - beta) * s` for every tensor.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, beta: f64) {
    for ((_, t), (_, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
}

pub fn grads_all_zero(grads: &DetectorParams) -> bool {
    grads.tensors().iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0))
}
