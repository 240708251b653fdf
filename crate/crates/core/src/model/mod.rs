//! EDSR-style super-resolution networks.
//!
//! Every network follows the same three-part layout:
//!
//! * **shallow**: one `s×s` conv lifting the image to `n_c` channels;
//! * **deep**: `n_b` residual blocks of `n_l` convs (ReLU between consecutive
//!   convs, additive skip around the block), then one trailing conv and a
//!   long skip back to the shallow features;
//! * **recon**: conv to `n_c·r²` channels, pixel shuffle by `r`, final conv
//!   back to image channels.
//!
//! Inputs are shifted by [`MEAN_SHIFT`] on the way in and out.

mod count;
pub mod srwt;

pub use count::{
    approx_param_count, conv_flops, estimate_flops, estimate_flops_with, exact_param_count,
    FlopConvention, ParamCount,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Fixed offset subtracted from the input and added back to the output, so
/// the convolutions see roughly zero-mean data. Parameter free.
pub const MEAN_SHIFT: f32 = 0.5;

fn default_kernel() -> usize {
    3
}

fn default_in_channels() -> usize {
    3
}

/// Hyperparameters that fully determine an [`SRModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels.
    pub n_c: usize,
    /// Convs per residual block.
    pub n_l: usize,
    /// Residual blocks.
    pub n_b: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Upscale factor (2, 3 or 4).
    pub scale: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn new(n_c: usize, n_l: usize, n_b: usize, scale: usize) -> Self {
        Self {
            n_c,
            n_l,
            n_b,
            kernel: 3,
            scale,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_l == 0 || self.n_b == 0 {
            return Err(Error::Config(format!(
                "n_c, n_l and n_b must be positive, got ({}, {}, {})",
                self.n_c, self.n_l, self.n_b
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!(
                "scale must be 2, 3 or 4, got {}",
                self.scale
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Conv layers in forward order.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let (c, k) = (self.n_c, self.kernel);
        let r2 = self.scale * self.scale;
        let mut out = vec![ConvSpec::new(
            "shallow",
            Module::Shallow,
            self.in_channels,
            c,
            k,
            Resolution::Low,
        )];
        for b in 0..self.n_b {
            for l in 0..self.n_l {
                out.push(ConvSpec::new(
                    format!("deep.block{b}.conv{l}"),
                    Module::Deep,
                    c,
                    c,
                    k,
                    Resolution::Low,
                ));
            }
        }
        out.push(ConvSpec::new(
            "deep.tail",
            Module::Deep,
            c,
            c,
            k,
            Resolution::Low,
        ));
        out.push(ConvSpec::new(
            "recon.up",
            Module::Recon,
            c,
            c * r2,
            k,
            Resolution::Low,
        ));
        out.push(ConvSpec::new(
            "recon.out",
            Module::Recon,
            c,
            self.in_channels,
            k,
            Resolution::High,
        ));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Shallow,
    Deep,
    Recon,
}

/// Spatial grid a layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub module: Module,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub resolution: Resolution,
}

impl ConvSpec {
    fn new(
        name: impl Into<String>,
        module: Module,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        resolution: Resolution,
    ) -> Self {
        Self {
            name: name.into(),
            module,
            in_ch,
            out_ch,
            kernel,
            resolution,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub module: Module,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SRModel {
    config: ModelConfig,
    /// Weight then bias for every layer of `config.layers()`, in order.
    params: Vec<Param>,
}

/// Parameters registered on a graph by [`SRModel::forward`], in model order.
pub type ParamVars = Vec<Var>;

impl SRModel {
    /// Deterministic He-uniform initialisation (gain 1); the last conv of
    /// every residual block is scaled by 0.1. Biases draw from
    /// `U(±1/sqrt(fan_in))`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in config.layers() {
            let fan_in = spec.in_ch * spec.kernel * spec.kernel;
            let mut bound = (3.0 / fan_in as f64).sqrt() as f32;
            if spec.name.ends_with(&format!(".conv{}", config.n_l - 1)) {
                bound *= 0.1;
            }
            let bias_bound = (1.0 / fan_in as f64).sqrt() as f32;
            let shape = spec.weight_shape();
            let w = Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound));
            params.push(Param {
                name: format!("{}.weight", spec.name),
                module: spec.module,
                tensor: w,
            });
            params.push(Param {
                name: format!("{}.bias", spec.name),
                module: spec.module,
                tensor: Tensor::from_fn(&[spec.out_ch], |_| {
                    rng.random_range(-bias_bound..=bias_bound)
                }),
            });
        }
        Ok(Self { config, params })
    }

    /// Assemble a model from explicit tensors; names and shapes must match
    /// the layout `config` implies.
    pub fn from_params(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::build(config, 0)?;
        if tensors.len() != template.params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors for {config:?}, got {}",
                template.params.len(),
                tensors.len()
            )));
        }
        let mut params = template.params;
        for (slot, (name, t)) in params.iter_mut().zip(tensors) {
            if slot.name != name || slot.tensor.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            slot.tensor = t;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> ParamCount {
        count::exact_param_count(self)
    }

    /// Record the forward pass on `g`. Parameters become graph leaves that
    /// require grad when `trainable` is set.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, ParamVars)> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let vars: ParamVars = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), trainable))
            .collect();
        let pad = self.config.kernel / 2;
        let mut layer = 0usize;
        let mut conv = |g: &mut Graph, input: Var| -> Result<Var> {
            let (w, b) = (vars[2 * layer], vars[2 * layer + 1]);
            layer += 1;
            g.conv2d(input, w, Some(b), 1, pad)
        };

        let shift = g.constant(Tensor::full(g.value(x).shape(), MEAN_SHIFT));
        let x = g.sub(x, shift)?;
        let shallow = conv(g, x)?;
        let mut h = shallow;
        for _ in 0..self.config.n_b {
            let mut r = h;
            for l in 0..self.config.n_l {
                r = conv(g, r)?;
                if l + 1 < self.config.n_l {
                    r = g.relu(r);
                }
            }
            h = g.add(h, r)?;
        }
        let tail = conv(g, h)?;
        let deep = g.add(tail, shallow)?;
        let up = conv(g, deep)?;
        let up = g.pixel_shuffle(up, self.config.scale)?;
        let out = conv(g, up)?;
        let back = g.constant(Tensor::full(g.value(out).shape(), MEAN_SHIFT));
        let out = g.add(out, back)?;
        Ok((out, vars))
    }

    /// Inference on a batch (no gradient tracking).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }
}
