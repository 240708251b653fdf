use serde::{Deserialize, Serialize};

use super::{ConvSpec, ModelConfig, Module, Resolution, SRModel};

/// Exact weight + bias element counts per module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub shallow: usize,
    pub deep: usize,
    pub recon: usize,
    pub total: usize,
}

impl ParamCount {
    fn add(&mut self, module: Module, n: usize) {
        match module {
            Module::Shallow => self.shallow += n,
            Module::Deep => self.deep += n,
            Module::Recon => self.recon += n,
        }
        self.total += n;
    }

    /// Count from the layer layout alone, without allocating weights.
    pub fn for_config(config: &ModelConfig) -> Self {
        let mut c = Self::default();
        for spec in config.layers() {
            c.add(spec.module, spec.param_count());
        }
        c
    }
}

pub fn exact_param_count(model: &SRModel) -> ParamCount {
    let mut c = ParamCount::default();
    for p in model.params() {
        c.add(p.module, p.tensor.numel());
    }
    c
}

/// `k · n_b · (n_l + 1) · n_c²` with `k = s²`.
///
/// Biases and the trailing conv are not modelled separately; the `+1`
/// absorbs them.
pub fn approx_param_count(config: &ModelConfig) -> f64 {
    let k = (config.kernel * config.kernel) as f64;
    k * config.n_b as f64 * (config.n_l + 1) as f64 * (config.n_c as f64).powi(2)
}

/// How multiply-accumulates are reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate reported as one operation. This is how the
    /// SR model comparisons usually count "FLOPs".
    #[default]
    MacAsFlop,
    /// One multiply-accumulate reported as two operations.
    TwoPerMac,
}

impl FlopConvention {
    fn per_mac(self) -> f64 {
        match self {
            FlopConvention::MacAsFlop => 1.0,
            FlopConvention::TwoPerMac => 2.0,
        }
    }
}

/// Cost of one conv layer producing `out_pixels` spatial positions.
pub fn conv_flops(spec: &ConvSpec, out_pixels: f64, convention: FlopConvention) -> f64 {
    let macs = out_pixels * spec.out_ch as f64 * (spec.in_ch * spec.kernel * spec.kernel) as f64;
    macs * convention.per_mac()
}

/// Convolution cost of one forward pass producing an `out_h × out_w` image,
/// in the default [`FlopConvention`]. ReLU, shuffle and additions are not
/// counted.
pub fn estimate_flops(config: &ModelConfig, out_h: usize, out_w: usize) -> f64 {
    estimate_flops_with(config, out_h, out_w, FlopConvention::default())
}

pub fn estimate_flops_with(
    config: &ModelConfig,
    out_h: usize,
    out_w: usize,
    convention: FlopConvention,
) -> f64 {
    let hr = (out_h * out_w) as f64;
    let lr = hr / (config.scale * config.scale) as f64;
    config
        .layers()
        .iter()
        .map(|spec| {
            let pixels = match spec.resolution {
                Resolution::Low => lr,
                Resolution::High => hr,
            };
            conv_flops(spec, pixels, convention)
        })
        .sum()
}
