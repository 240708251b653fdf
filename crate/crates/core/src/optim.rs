//! AdaMax, the optimizer used for pretraining and distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;

/// Learning-rate schedule over a fixed step budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down towards 0 at the last step.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total > 0 => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
            LrSchedule::Cosine => base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaMaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdaMaxConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            schedule: LrSchedule::Cosine,
        }
    }
}

/// Adam variant with an infinity-norm second moment:
///
/// ```text
/// m ← β1·m + (1 − β1)·g
/// u ← max(β2·u, |g| + eps)
/// θ ← θ − lr / (1 − β1^t) · m / u
/// ```
#[derive(Clone, Debug)]
pub struct AdaMax {
    cfg: AdaMaxConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdaMax {
    pub fn new(cfg: AdaMaxConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            u: Vec::new(),
        }
    }

    /// Override the step size, e.g. from an [`LrSchedule`].
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Set the step size for zero-based `step` of `total` from the configured schedule.
    pub fn schedule(&mut self, base: &AdaMaxConfig, step: usize, total: usize) {
        self.cfg.lr = base.schedule.at(base.lr, step, total);
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]` must match `params[i]` element for element.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.u = self.m.clone();
        }
        self.t += 1;
        let AdaMaxConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let step = lr / (1.0 - beta1.powi(self.t as i32));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.tensor.numel() {
                return Err(Error::shape(format!(
                    "gradient for `{}` has {} elements, expected {}",
                    p.name,
                    g.len(),
                    p.tensor.numel()
                )));
            }
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                u[j] = (beta2 * u[j]).max(gj.abs() + eps);
                *w = (*w as f64 - step * m[j] / u[j]) as f32;
            }
        }
        Ok(())
    }
}
