//! Shared training plumbing: per-batch gradients, seed streams, JSON-lines
//! logs and the Charbonnier pretraining loop that produces teachers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, PatchSampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SRModel};
use crate::optim::{AdaMax, AdaMaxConfig};
use crate::tensor::{Graph, Tensor, Var};

/// Loss value, caller data and one gradient buffer per model parameter.
pub struct StepOutput<T> {
    pub loss: f32,
    pub extra: T,
    pub grads: Vec<Vec<f32>>,
}

/// Run `model` on `input`, build a scalar loss from its output and
/// backpropagate. Parameters that the loss never reaches get zero gradients.
pub fn gradients<T>(
    model: &SRModel,
    input: &Tensor,
    loss: impl FnOnce(&mut Graph, Var, &[Var]) -> Result<(Var, T)>,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let (out, vars) = model.forward(&mut g, x, true)?;
    let (l, extra) = loss(&mut g, out, &vars)?;
    g.backward(l)?;
    let grads = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();
    Ok(StepOutput {
        loss: g.value(l).item(),
        extra,
        grads,
    })
}

/// Independent seed for a named random stream (splitmix64 finaliser).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_INIT: u64 = 1;
const STREAM_PATCHES: u64 = 2;

/// The patch stream every training loop draws from for a given `seed`.
pub fn training_sampler(
    set: &ImageSet,
    patch: usize,
    scale: usize,
    augment: bool,
    seed: u64,
) -> Result<PatchSampler> {
    PatchSampler::new(
        set,
        SamplerConfig {
            patch,
            scale,
            augment,
            seed: sub_seed(seed, STREAM_PATCHES),
        },
    )
}

/// Append-only writer with one JSON object per line.
pub struct JsonLines<W: Write> {
    out: W,
    path: PathBuf,
}

impl JsonLines<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            path: PathBuf::from("<stream>"),
        }
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub patch: usize,
    pub epsilon: f32,
    pub augment: bool,
    pub seed: u64,
    pub optimizer: AdaMaxConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            batch: 16,
            patch: 48,
            epsilon: 1e-3,
            augment: true,
            seed: 0,
            optimizer: AdaMaxConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iter: usize,
    pub loss: f32,
}

/// Fit a freshly initialised model with the Charbonnier fidelity loss.
pub fn pretrain(config: ModelConfig, set: &ImageSet, cfg: &PretrainConfig) -> Result<SRModel> {
    pretrain_logged(config, set, cfg, |_| Ok(()))
}

pub fn pretrain_logged(
    config: ModelConfig,
    set: &ImageSet,
    cfg: &PretrainConfig,
    on_log: impl FnMut(&TrainLog) -> Result<()>,
) -> Result<SRModel> {
    let mut model = SRModel::build(config, sub_seed(cfg.seed, STREAM_INIT))?;
    fit_charbonnier(&mut model, set, cfg, on_log)?;
    Ok(model)
}

/// Continue training `model` in place; the patch stream and optimizer start
/// fresh from `cfg.seed`.
pub fn fit_charbonnier(
    model: &mut SRModel,
    set: &ImageSet,
    cfg: &PretrainConfig,
    mut on_log: impl FnMut(&TrainLog) -> Result<()>,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.epsilon > 0.0) {
        return Err(Error::Config(
            "batch must be positive and epsilon > 0".into(),
        ));
    }
    let mut sampler =
        training_sampler(set, cfg.patch, model.config().scale, cfg.augment, cfg.seed)?;
    let mut opt = AdaMax::new(cfg.optimizer);
    for iter in 0..cfg.iters {
        let batch = sampler.next_batch(cfg.batch)?;
        let hr = batch.hr;
        let eps = cfg.epsilon;
        let step = gradients(model, &batch.lr, |g, out, _| {
            let gt = g.constant(hr);
            Ok((g.charbonnier(out, gt, eps)?, ()))
        })?;
        if !step.loss.is_finite() {
            return Err(Error::Data(format!("loss diverged at iteration {iter}")));
        }
        opt.schedule(&cfg.optimizer, iter, cfg.iters);
        opt.step(model.params_mut(), &step.grads)?;
        on_log(&TrainLog {
            iter,
            loss: step.loss,
        })?;
        if (iter + 1) % 100 == 0 {
            info!("fit {}/{}: loss {:.5}", iter + 1, cfg.iters, step.loss);
        }
    }
    Ok(())
}
