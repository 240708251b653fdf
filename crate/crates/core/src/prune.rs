//! Sparsity-inducing fine-tuning with a two-phase orthant-based proximal
//! SGD solver, and density measurement over the deep feature module.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{Module, Param, SRModel};
use crate::tensor::{Graph, Var};
use crate::train::{gradients, training_sampler};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Charbonnier constant.
    pub epsilon: f32,
    /// L1 weight. Zero disables the sparsity term and the orthant projection.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fraction of all steps spent in the proximal phase.
    pub switch_point: f64,
    pub zero_tol: f32,
    pub batch: usize,
    pub patch: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda: 1e-4,
            lr: 0.05,
            epochs: 1,
            steps_per_epoch: 200,
            switch_point: 0.5,
            zero_tol: 0.0,
            batch: 16,
            patch: 48,
            augment: true,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.switch_point > 0.0 && self.switch_point < 1.0) {
            return bad("switch_point must lie in (0, 1)");
        }
        if !(self.zero_tol >= 0.0) {
            return bad("zero_tol must be >= 0");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Phase for zero-based step `step`.
    pub fn phase_at(&self, step: usize) -> Phase {
        if (step as f64) < self.switch_point * self.total_steps() as f64 {
            Phase::ProxSg
        } else {
            Phase::Orthant
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ProxSg,
    Orthant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub name: String,
    pub nonzero: usize,
    pub total: usize,
    pub density: f64,
}

/// Training settings attached to reports produced by [`run_pruning`].
/// Batch, patch and learning rate are local choices, flagged in `local_defaults`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRunInfo {
    pub lambda: f64,
    pub epsilon: f32,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub switch_point: f64,
    pub local_defaults: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub nonzero_deep: usize,
    pub total_deep: usize,
    pub density: f64,
    pub zero_tol: f32,
    /// Diagnostic only; `density` is over the whole deep module.
    pub per_layer_density: Vec<LayerDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<PruneRunInfo>,
}

/// Count deep-module parameters (weights and biases) with `|θ| > zero_tol`.
pub fn measure_density(model: &SRModel, zero_tol: f32) -> PruneReport {
    let mut per_layer: Vec<LayerDensity> = Vec::new();
    for p in model.params().iter().filter(|p| p.module == Module::Deep) {
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
        let nz = p
            .tensor
            .data()
            .iter()
            .filter(|v| v.abs() > zero_tol)
            .count();
        match per_layer.last_mut() {
            Some(last) if last.name == layer => {
                last.nonzero += nz;
                last.total += p.tensor.numel();
            }
            _ => per_layer.push(LayerDensity {
                name: layer.to_string(),
                nonzero: nz,
                total: p.tensor.numel(),
                density: 0.0,
            }),
        }
    }
    for l in &mut per_layer {
        l.density = l.nonzero as f64 / l.total as f64;
    }
    let nonzero_deep: usize = per_layer.iter().map(|l| l.nonzero).sum();
    let total_deep: usize = per_layer.iter().map(|l| l.total).sum();
    PruneReport {
        nonzero_deep,
        total_deep,
        density: nonzero_deep as f64 / total_deep as f64,
        zero_tol,
        per_layer_density: per_layer,
        run: None,
    }
}

/// Charbonnier fidelity plus `λ·Σ|θ|` over `params`.
pub fn prune_loss(
    g: &mut Graph,
    sr: Var,
    gt: Var,
    params: &[Var],
    cfg: &PruneConfig,
) -> Result<Var> {
    let mut loss = g.charbonnier(sr, gt, cfg.epsilon)?;
    if !params.is_empty() {
        let mut l1: Option<Var> = None;
        for &p in params {
            let a = g.abs(p);
            let s = g.sum(a);
            l1 = Some(match l1 {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let reg = g.scale(l1.expect("non-empty"), cfg.lambda as f32);
        loss = g.add(loss, reg)?;
    }
    Ok(loss)
}

/// Proximal operator of `t·|x|`.
#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// One solver update on a flat parameter buffer; `grads` are gradients of
/// the smooth part only.
///
/// `ProxSg`: `θ ← soft_threshold(θ − lr·g, lr·λ)`.
/// `Orthant`: `θ ← θ − lr·(g + λ·sign θ)` for nonzero θ, then any coordinate
/// that changed sign is set to 0. Zeros stay zero. With `λ = 0` the step is
/// plain SGD.
pub fn obprox_step_slice(theta: &mut [f32], grads: &[f32], lr: f64, lambda: f64, phase: Phase) {
    debug_assert_eq!(theta.len(), grads.len());
    for (t, &g) in theta.iter_mut().zip(grads) {
        let x = *t as f64;
        let g = g as f64;
        let next = match phase {
            _ if lambda == 0.0 => x - lr * g,
            Phase::ProxSg => soft_threshold(x - lr * g, lr * lambda),
            Phase::Orthant => {
                if x == 0.0 {
                    0.0
                } else {
                    let y = x - lr * (g + lambda * x.signum());
                    if y.signum() != x.signum() {
                        0.0
                    } else {
                        y
                    }
                }
            }
        };
        *t = next as f32;
    }
}

pub fn obprox_step(
    params: &mut [Param],
    grads: &[Vec<f32>],
    cfg: &PruneConfig,
    phase: Phase,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if g.len() != p.tensor.numel() {
            return Err(Error::shape(format!(
                "gradient length mismatch for `{}`",
                p.name
            )));
        }
        obprox_step_slice(p.tensor.data_mut(), g, cfg.lr, cfg.lambda, phase);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub iter: usize,
    pub phase: Phase,
    /// Charbonnier term on the batch, before the update.
    pub fidelity: f32,
    /// `λ·‖θ‖₁` before the update.
    pub l1: f64,
    pub density: f64,
}

fn l1_norm(model: &SRModel) -> f64 {
    model
        .params()
        .iter()
        .flat_map(|p| p.tensor.data())
        .map(|&v| (v as f64).abs())
        .sum()
}

/// Fine-tune `model` in place under the sparsity-inducing loss.
pub fn run_pruning(model: &mut SRModel, set: &ImageSet, cfg: &PruneConfig) -> Result<PruneReport> {
    run_pruning_logged(model, set, cfg, |_| Ok(()))
}

pub fn run_pruning_logged(
    model: &mut SRModel,
    set: &ImageSet,
    cfg: &PruneConfig,
    mut on_log: impl FnMut(&PruneLog) -> Result<()>,
) -> Result<PruneReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("pruning set is empty".into()));
    }
    let mut sampler =
        training_sampler(set, cfg.patch, model.config().scale, cfg.augment, cfg.seed)?;
    let total = cfg.total_steps();
    for iter in 0..total {
        let phase = cfg.phase_at(iter);
        let batch = sampler.next_batch(cfg.batch)?;
        let hr = batch.hr;
        let eps = cfg.epsilon;
        let step = gradients(model, &batch.lr, |g, out, _| {
            let gt = g.constant(hr);
            Ok((g.charbonnier(out, gt, eps)?, ()))
        })?;
        if !step.loss.is_finite() {
            return Err(Error::Data(format!("pruning loss diverged at step {iter}")));
        }
        let l1 = cfg.lambda * l1_norm(model);
        obprox_step(model.params_mut(), &step.grads, cfg, phase)?;
        let density = measure_density(model, cfg.zero_tol).density;
        on_log(&PruneLog {
            iter,
            phase,
            fidelity: step.loss,
            l1,
            density,
        })?;
        if (iter + 1) % 50 == 0 {
            info!(
                "prune {}/{total} ({phase:?}): fidelity {:.5} density {density:.4}",
                iter + 1,
                step.loss
            );
        }
    }
    let mut report = measure_density(model, cfg.zero_tol);
    report.run = Some(PruneRunInfo {
        lambda: cfg.lambda,
        epsilon: cfg.epsilon,
        lr: cfg.lr,
        steps: total,
        batch: cfg.batch,
        patch: cfg.patch,
        switch_point: cfg.switch_point,
        local_defaults: ["batch", "patch", "lr"].map(String::from).to_vec(),
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(0.5, 0.1), 0.4);
        assert_eq!(soft_threshold(-0.5, 0.1), -0.4);
        assert_eq!(soft_threshold(0.05, 0.1), 0.0);
        assert_eq!(soft_threshold(-0.1, 0.1), 0.0);
    }

    #[test]
    fn step_fixed_point_and_prox() {
        for phase in [Phase::ProxSg, Phase::Orthant] {
            let mut t = [0.0f32];
            obprox_step_slice(&mut t, &[0.0], 1.0, 0.1, phase);
            assert_eq!(t, [0.0]);
        }
        let mut t = [0.5f32];
        obprox_step_slice(&mut t, &[0.0], 1.0, 0.1, Phase::ProxSg);
        assert!((t[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn orthant_projects_sign_flips_to_zero() {
        let mut t = [0.1f32, -0.1, 0.0, 1.0];
        obprox_step_slice(&mut t, &[1.0, -1.0, 5.0, 0.1], 1.0, 0.0001, Phase::Orthant);
        assert_eq!(&t[..3], &[0.0, 0.0, 0.0]);
        assert!(t[3] > 0.0);
    }

    #[test]
    fn phases_switch_halfway() {
        let cfg = PruneConfig {
            epochs: 2,
            steps_per_epoch: 5,
            ..Default::default()
        };
        let phases: Vec<_> = (0..10).map(|i| cfg.phase_at(i)).collect();
        assert_eq!(phases.iter().filter(|p| **p == Phase::ProxSg).count(), 5);
        assert_eq!(phases[4], Phase::ProxSg);
        assert_eq!(phases[5], Phase::Orthant);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        assert!(PruneConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PruneConfig {
            switch_point: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PruneConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
