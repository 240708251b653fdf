//! Teacher-student training with a Laplacian-pyramid distillation term on
//! outputs and on their high-frequency residuals.

use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::SRModel;
use crate::optim::{AdaMax, AdaMaxConfig};
use crate::tensor::{Graph, PadMode, Var};
use crate::train::{gradients, training_sampler};

/// 1-D binomial taps; the 2-D kernel is their outer product.
pub const BINOMIAL_5: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

pub fn gaussian_kernel_5x5() -> [f32; 25] {
    let mut k = [0.0; 25];
    for (i, a) in BINOMIAL_5.iter().enumerate() {
        for (j, b) in BINOMIAL_5.iter().enumerate() {
            k[i * 5 + j] = a * b;
        }
    }
    k
}

/// Per-channel 5×5 binomial blur with reflect padding.
pub fn gaussian_blur_5x5(g: &mut Graph, x: Var) -> Result<Var> {
    let padded = g.pad(x, 2, PadMode::Reflect)?;
    let k: Arc<[f32]> = Arc::new(gaussian_kernel_5x5());
    g.depthwise_fixed(padded, k, 5)
}

/// `x − blur(x)`.
pub fn high_freq(g: &mut Graph, x: Var) -> Result<Var> {
    let b = gaussian_blur_5x5(g, x)?;
    g.sub(x, b)
}

/// Largest level count whose coarsest band is still at least one pixel.
pub fn max_levels(h: usize, w: usize) -> usize {
    let m = h.min(w).max(1);
    (usize::BITS - m.leading_zeros()) as usize
}

/// Per-level weight of the pyramid loss; level 0 is the finest band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelWeights {
    /// `2^-j`: coarse bands count less. Keeps detail learning from being
    /// drowned out by the low-pass residual.
    #[default]
    Halving,
    Uniform,
    /// `2^j`.
    Doubling,
}

impl LevelWeights {
    pub fn weight(self, level: usize) -> f32 {
        match self {
            Self::Halving => 0.5f32.powi(level as i32),
            Self::Uniform => 1.0,
            Self::Doubling => 2f32.powi(level as i32),
        }
    }
}

/// [`laplacian_loss_weighted`] with the default [`LevelWeights`].
pub fn laplacian_loss(g: &mut Graph, a: Var, b: Var, levels: usize) -> Result<Var> {
    laplacian_loss_weighted(g, a, b, levels, LevelWeights::default())
}

/// Mean absolute value of each of the `levels − 1` band-pass residuals and of
/// the final low-pass, weighted per level. One level is plain L1.
pub fn laplacian_loss_weighted(
    g: &mut Graph,
    a: Var,
    b: Var,
    levels: usize,
    weights: LevelWeights,
) -> Result<Var> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let (_, _, h, w) = g.value(a).dims4()?;
    let feasible = max_levels(h, w);
    if levels > feasible {
        return Err(Error::shape(format!(
            "{h}x{w} image supports at most {feasible} pyramid levels, {levels} requested"
        )));
    }
    let mut cur = g.sub(a, b)?;
    let mut loss: Option<Var> = None;
    let mut add_term = |g: &mut Graph, band: Var, weight: f32| -> Result<()> {
        let abs = g.abs(band);
        let m = g.mean(abs);
        let t = g.scale(m, weight);
        loss = Some(match loss {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
        Ok(())
    };
    for j in 0..levels - 1 {
        let (_, _, ch, cw) = g.value(cur).dims4()?;
        let blurred = gaussian_blur_5x5(g, cur)?;
        let down = g.decimate2(blurred)?;
        let zi = g.zero_insert2(down, ch, cw)?;
        let up = gaussian_blur_5x5(g, zi)?;
        let up = g.scale(up, 4.0);
        let band = g.sub(cur, up)?;
        add_term(g, band, weights.weight(j))?;
        cur = down;
    }
    add_term(g, cur, weights.weight(levels - 1))?;
    Ok(loss.expect("at least one term"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentLoss {
    #[default]
    Charbonnier,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub alpha: f32,
    pub pyramid_levels: usize,
    pub level_weights: LevelWeights,
    pub epsilon: f32,
    pub student_loss: StudentLoss,
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub augment: bool,
    pub seed: u64,
    pub optimizer: AdaMaxConfig,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            pyramid_levels: 5,
            level_weights: LevelWeights::Halving,
            epsilon: 1e-3,
            student_loss: StudentLoss::Charbonnier,
            iterations: 1000,
            batch: 16,
            patch: 48,
            augment: true,
            seed: 0,
            optimizer: AdaMaxConfig::default(),
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Graph nodes of the two distillation terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct DisLoss {
    pub total: Var,
    pub lap_image: Var,
    pub lap_hf: Var,
}

pub fn dis_loss(g: &mut Graph, stu: Var, tea: Var, cfg: &KDConfig) -> Result<DisLoss> {
    let lap_image = laplacian_loss_weighted(g, stu, tea, cfg.pyramid_levels, cfg.level_weights)?;
    let hs = high_freq(g, stu)?;
    let ht = high_freq(g, tea)?;
    let lap_hf = laplacian_loss_weighted(g, hs, ht, cfg.pyramid_levels, cfg.level_weights)?;
    let total = g.add(lap_image, lap_hf)?;
    Ok(DisLoss {
        total,
        lap_image,
        lap_hf,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct KDLoss {
    pub total: Var,
    pub student_term: Var,
    pub dis: DisLoss,
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f32,
    pub student_term: f32,
    pub dis_term: f32,
    pub lap_image: f32,
    pub lap_hf: f32,
}

impl KDLoss {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents {
            total: g.value(self.total).item(),
            student_term: g.value(self.student_term).item(),
            dis_term: g.value(self.dis.total).item(),
            lap_image: g.value(self.dis.lap_image).item(),
            lap_hf: g.value(self.dis.lap_hf).item(),
        }
    }
}

/// `α·L_stu(stu, gt) + dis_loss(stu, tea)`.
pub fn total_loss(g: &mut Graph, stu: Var, tea: Var, gt: Var, cfg: &KDConfig) -> Result<KDLoss> {
    let student_term = match cfg.student_loss {
        StudentLoss::Charbonnier => g.charbonnier(stu, gt, cfg.epsilon)?,
        StudentLoss::L1 => {
            let d = g.sub(stu, gt)?;
            let a = g.abs(d);
            g.mean(a)
        }
    };
    let dis = dis_loss(g, stu, tea, cfg)?;
    let weighted = g.scale(student_term, cfg.alpha);
    let total = g.add(weighted, dis.total)?;
    Ok(KDLoss {
        total,
        student_term,
        dis,
    })
}

/// Where the distillation target comes from.
#[derive(Clone, Copy, Debug)]
pub enum Teacher<'a> {
    Model(&'a SRModel),
    /// Use the HR patch itself; the distillation term then compares against
    /// ground truth.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDLog {
    pub iter: usize,
    pub total: f32,
    pub student_term: f32,
    pub dis_term: f32,
    pub lap_image: f32,
    pub lap_hf: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub iterations: usize,
    pub first: Option<KDLog>,
    pub last: Option<KDLog>,
}

pub fn run_distillation(
    student: &mut SRModel,
    teacher: Teacher<'_>,
    set: &ImageSet,
    cfg: &KDConfig,
) -> Result<DistillSummary> {
    run_distillation_logged(student, teacher, set, cfg, |_| Ok(()))
}

/// Train `student` in place with AdaMax; every iteration's losses (measured
/// before its update) go to `on_log`.
pub fn run_distillation_logged(
    student: &mut SRModel,
    teacher: Teacher<'_>,
    set: &ImageSet,
    cfg: &KDConfig,
    mut on_log: impl FnMut(&KDLog) -> Result<()>,
) -> Result<DistillSummary> {
    cfg.validate()?;
    if let Teacher::Model(t) = teacher {
        let (tc, sc) = (t.config(), student.config());
        if tc.scale != sc.scale || tc.in_channels != sc.in_channels {
            return Err(Error::Config(format!(
                "teacher is x{} with {} channels but student is x{} with {}",
                tc.scale, tc.in_channels, sc.scale, sc.in_channels
            )));
        }
    }
    let mut sampler = training_sampler(
        set,
        cfg.patch,
        student.config().scale,
        cfg.augment,
        cfg.seed,
    )?;
    let mut opt = AdaMax::new(cfg.optimizer);
    let mut first = None;
    let mut last = None;
    for iter in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch)?;
        let target = match teacher {
            Teacher::Model(t) => t.predict(&batch.lr)?,
            Teacher::GroundTruth => batch.hr.clone(),
        };
        let hr = batch.hr;
        let step = gradients(student, &batch.lr, |g, out, _| {
            let tea = g.constant(target);
            let gt = g.constant(hr);
            let l = total_loss(g, out, tea, gt, cfg)?;
            Ok((l.total, l.values(g)))
        })?;
        let c = step.extra;
        if !c.total.is_finite() {
            return Err(Error::Data(format!(
                "distillation loss diverged at iteration {iter}"
            )));
        }
        opt.schedule(&cfg.optimizer, iter, cfg.iterations);
        opt.step(student.params_mut(), &step.grads)?;
        let rec = KDLog {
            iter,
            total: c.total,
            student_term: c.student_term,
            dis_term: c.dis_term,
            lap_image: c.lap_image,
            lap_hf: c.lap_hf,
        };
        on_log(&rec)?;
        first.get_or_insert(rec);
        last = Some(rec);
        if (iter + 1) % 100 == 0 {
            info!(
                "distill {}/{}: total {:.5} dis {:.5}",
                iter + 1,
                cfg.iterations,
                c.total,
                c.dis_term
            );
        }
    }
    Ok(DistillSummary {
        iterations: cfg.iterations,
        first,
        last,
    })
}
