use serde::{Deserialize, Serialize};

use super::{GradientMap, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr · ½(1 + cos(π·step/total_steps))`, `step` counted from zero.
    Cosine { total_steps: u64 },
}

impl Schedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { total_steps } => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            schedule: Schedule::Constant,
        }
    }
}

/// Per-parameter moments plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when no clipping happened).
    pub clip_scale: f64,
    pub lr: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn from_parts(config: AdamWConfig, step: u64, first: Vec<Tensor<S>>, second: Vec<Tensor<S>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    /// Clip, update moments, apply decoupled decay and the Adam update.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &GradientMap<S>) -> Result<StepReport> {
        if self.first.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            match grads.get(id) {
                None => {
                    return Err(Error::contract(format!(
                        "missing gradient for parameter `{}`",
                        store.name(id)
                    )))
                }
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(Error::dim(format!(
                        "gradient for `{}` has shape {:?}, parameter {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    )))
                }
                _ => {}
            }
        }
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm > S::of(c) => S::of(c) / norm,
            _ => S::one(),
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(self.config.beta1), S::of(self.config.beta2));
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let lr_s = S::of(lr);
        let decay = S::one() - lr_s * S::of(self.config.weight_decay);
        let eps = S::of(self.config.eps);
        for id in store.ids() {
            let g = grads.get(id).expect("checked above").data();
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - lr_s * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepReport {
            grad_norm: norm.to_f64_lossy(),
            clip_scale: clip.to_f64_lossy(),
            lr,
        })
    }
}
