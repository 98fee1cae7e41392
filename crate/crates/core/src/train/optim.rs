//! AdamW with decoupled weight decay and the two learning-rate schedules.

use indexmap::IndexMap;
use melrof_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape, CoreError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub first: IndexMap<String, Vec<T>>,
    pub second: IndexMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }
}

/// One AdamW update. `lr(name)` gives each parameter's learning rate; the
/// configured `hyper.lr` is not consulted. Every gradient is checked before
/// any parameter changes, so a rejected step leaves params and state intact.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut OptimizerState<T>,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.tensor(name)?;
        if p.shape() != g.shape() {
            return Err(shape(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(CoreError::NonFinite(format!("gradient of {name}")));
        }
    }
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, g) in grads {
        let rate = lr(name);
        let n = g.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..n {
            let gi = g.data()[i].as_f64();
            let mi = h.beta1 * m[i].as_f64() + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * v[i].as_f64() + (1.0 - h.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let mut pi = p[i].as_f64();
            pi -= rate * h.weight_decay * pi;
            pi -= rate * (mi / c1) / ((vi / c2).sqrt() + h.eps);
            p[i] = T::of(pi);
        }
    }
    Ok(())
}

/// Step decay: `base * factor^floor(step / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: u64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            base: 5e-4,
            factor: 0.9,
            every: 40_000,
        }
    }
}

impl StepDecay {
    pub fn lr(&self, step: u64) -> f64 {
        self.base * self.factor.powi((step / self.every.max(1)) as i32)
    }
}

/// Separation pretraining rate: 5e-4, reduced by 10% every 40k steps.
pub fn lr_schedule_separation(step: u64) -> f64 {
    StepDecay::default().lr(step)
}

/// Reduce-on-plateau for the two fine-tuning parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub heads_lr: f64,
    pub backbone_lr: f64,
    pub factor: f64,
    pub patience: u32,
    pub best: Option<f64>,
    pub bad_epochs: u32,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(1e-3, 1e-4, 0.9, 15)
    }
}

impl PlateauSchedule {
    pub fn new(heads_lr: f64, backbone_lr: f64, factor: f64, patience: u32) -> Self {
        Self {
            heads_lr,
            backbone_lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss. After `patience` consecutive
    /// epochs without a strict improvement both rates are scaled by `factor`
    /// and the counter restarts.
    pub fn observe(&mut self, loss: f64) {
        match self.best {
            Some(b) if loss >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.heads_lr *= self.factor;
                    self.backbone_lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
    }

    /// `(heads, backbone)`.
    pub fn lrs(&self) -> (f64, f64) {
        (self.heads_lr, self.backbone_lr)
    }
}

/// `(heads, backbone)` rates after replaying a validation history through the
/// default plateau schedule.
pub fn lr_schedule_finetune(history: &[f64]) -> (f64, f64) {
    let mut s = PlateauSchedule::default();
    for &l in history {
        s.observe(l);
    }
    s.lrs()
}
