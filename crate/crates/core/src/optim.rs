//! SGD with momentum, Adam, and learning-rate schedules.
//!
//! Weight decay is coupled: `wd · p` is added to the gradient before the
//! update, for both optimizers.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { base_lr: f64 },
    /// Half-period cosine from `base_lr` at step 0 to zero at `total_steps`.
    Cosine { base_lr: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } => base_lr,
            LrSchedule::Cosine { base_lr, total_steps } => {
                if step >= total_steps {
                    return 0.0;
                }
                let t = step as f64 / total_steps as f64;
                0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } | LrSchedule::Cosine { base_lr, .. } => base_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer settings plus per-parameter auxiliary buffers.
///
/// For SGD `first` holds the momentum buffers; for Adam `first`/`second` are
/// the moment estimates. Buffers are parallel to `params`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn sgd(params: Vec<ParamId>, store: &ParamStore, lr: f64, momentum: f64, wd: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, params, store, lr, wd)
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(params: Vec<ParamId>, store: &ParamStore, lr: f64, wd: f64) -> Self {
        let kind = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        Self::new(kind, params, store, lr, wd)
    }

    pub fn new(
        kind: OptimizerKind,
        params: Vec<ParamId>,
        store: &ParamStore,
        lr: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|&p| Tensor::zeros(store.get(p).shape()))
            .collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        OptimizerState {
            kind,
            lr,
            weight_decay,
            step: 0,
            params,
            first: zeros,
            second,
        }
    }

    /// Apply one update with the current `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        for (slot, &pid) in self.params.iter().enumerate() {
            let Some(g) = grads.get(pid) else { continue };
            let p = store.get_mut(pid);
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let buf = self.first[slot].data_mut();
                    for ((pv, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf) {
                        let d = gv + wd * *pv;
                        *b = momentum * *b + d;
                        *pv -= self.lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = gv + wd * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *pv -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
