//! Compact hyperparameters from a measured density ratio.
//!
//! Block and layer counts scale by `d^(1/6)`; the channel width is then
//! solved from the parameter balance using the already-rounded counts:
//!
//! ```text
//! N̂_c = N_c · sqrt(d · N_b(N_l + 1) / (N̂_b(N̂_l + 1)))
//! ```
//!
//! and floored to a multiple of 8.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamCount, SRModel};

pub const CHANNEL_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    Nearest,
    Floor,
    Ceil,
    #[default]
    Search,
    /// `Search`, then the fixed table of reference targets in [`OVERRIDES`].
    PaperCompat,
}

impl std::str::FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nearest" => Ok(Self::Nearest),
            "floor" => Ok(Self::Floor),
            "ceil" => Ok(Self::Ceil),
            "search" => Ok(Self::Search),
            "paper_compat" | "papercompat" => Ok(Self::PaperCompat),
            other => Err(Error::Config(format!(
                "unknown rounding mode `{other}` (nearest, floor, ceil, search, paper-compat)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanWarning {
    /// The solved width fell below 8 and was raised.
    ChannelClamped,
    /// `achieved_ratio` is not within a factor 2 of `d`.
    RatioOutOfBounds,
    /// The target came from the override table.
    OverrideApplied,
}

/// Real-valued targets before any rounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTarget {
    pub n_c: f64,
    pub n_l: f64,
    pub n_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub source: ModelConfig,
    pub d: f64,
    pub rounding_mode: RoundingMode,
    pub target: ModelConfig,
    pub continuous: ContinuousTarget,
    /// `N̂_b(N̂_l+1)N̂_c² / (N_b(N_l+1)N_c²)`.
    pub achieved_ratio: f64,
    /// Ratio of exact deep-module parameter counts.
    pub achieved_exact_ratio: f64,
    pub warnings: Vec<PlanWarning>,
}

/// `(N_c, N_l, N_b)`.
pub type Triple = (usize, usize, usize);

/// Reference targets reproduced by `PaperCompat`: `(source, d) → target`.
pub const OVERRIDES: &[(Triple, f64, Triple)] = &[
    ((60, 6, 4), 0.089, (24, 4, 3)),
    ((64, 2, 16), 0.03, (16, 1, 8)),
];

fn check_density(d: f64) -> Result<()> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "density must lie in (0, 1], got {d}"
        )))
    }
}

/// Ratio of the per-block approximation for two configs.
pub fn approx_ratio(source: &ModelConfig, target: &ModelConfig) -> f64 {
    ratio_of(
        (source.n_c as f64, source.n_l as f64, source.n_b as f64),
        (target.n_c as f64, target.n_l as f64, target.n_b as f64),
    )
}

fn ratio_of(src: (f64, f64, f64), tgt: (f64, f64, f64)) -> f64 {
    (tgt.2 * (tgt.1 + 1.0) * tgt.0 * tgt.0) / (src.2 * (src.1 + 1.0) * src.0 * src.0)
}

/// Real-valued width for given (possibly real) block and layer counts.
pub fn solve_channels(source: &ModelConfig, d: f64, n_b: f64, n_l: f64) -> f64 {
    let num = d * source.n_b as f64 * (source.n_l as f64 + 1.0);
    source.n_c as f64 * (num / (n_b * (n_l + 1.0))).sqrt()
}

/// Exact-scaling targets with no rounding.
pub fn plan_continuous(source: &ModelConfig, d: f64) -> Result<ContinuousTarget> {
    check_density(d)?;
    let s = d.powf(1.0 / 6.0);
    let n_b = source.n_b as f64 * s;
    let n_l = (source.n_l as f64 + 1.0) * s - 1.0;
    Ok(ContinuousTarget {
        n_c: solve_channels(source, d, n_b, n_l),
        n_l,
        n_b,
    })
}

/// Floor to a positive multiple of 8, never above the source width.
fn round_channels(source_nc: usize, raw: f64) -> (usize, bool) {
    if raw >= source_nc as f64 {
        return (source_nc, false);
    }
    let c = (raw / CHANNEL_MULTIPLE as f64).floor() as usize * CHANNEL_MULTIPLE;
    if c < CHANNEL_MULTIPLE {
        (CHANNEL_MULTIPLE.min(source_nc), true)
    } else {
        (c, false)
    }
}

/// Resize the peripheral modules to the compact width. With the channel
/// count as the only shared width, this keeps `scale`, `kernel` and
/// `in_channels` from `source` and takes the hatted counts from `target`.
pub fn adjust_peripherals(source: &ModelConfig, target: &ModelConfig) -> ModelConfig {
    ModelConfig {
        n_c: target.n_c,
        n_l: target.n_l,
        n_b: target.n_b,
        kernel: source.kernel,
        scale: source.scale,
        in_channels: source.in_channels,
    }
}

struct Candidate {
    n_b: usize,
    n_l: usize,
    n_c: usize,
    clamped: bool,
    ratio: f64,
}

fn candidate(source: &ModelConfig, d: f64, n_b: usize, n_l: usize) -> Candidate {
    let (n_c, clamped) = round_channels(
        source.n_c,
        solve_channels(source, d, n_b as f64, n_l as f64),
    );
    let ratio = ratio_of(
        (source.n_c as f64, source.n_l as f64, source.n_b as f64),
        (n_c as f64, n_l as f64, n_b as f64),
    );
    Candidate {
        n_b,
        n_l,
        n_c,
        clamped,
        ratio,
    }
}

fn round_with(x: f64, mode: RoundingMode, min: usize) -> usize {
    let r = match mode {
        RoundingMode::Nearest => x.round(),
        RoundingMode::Floor => x.floor(),
        _ => x.ceil(),
    };
    (r.max(0.0) as usize).max(min)
}

fn override_for(source: &ModelConfig, d: f64) -> Option<(usize, usize, usize)> {
    OVERRIDES.iter().find_map(|&((nc, nl, nb), od, tgt)| {
        ((source.n_c, source.n_l, source.n_b) == (nc, nl, nb) && (d - od).abs() < 1e-9)
            .then_some(tgt)
    })
}

pub fn plan(source: &ModelConfig, d: f64, mode: RoundingMode) -> Result<CompressionPlan> {
    source.validate()?;
    let cont = plan_continuous(source, d)?;
    // Block and (layer + 1) counts are rounded; layer count must stay >= 1.
    let lp1 = cont.n_l + 1.0;
    let chosen = match mode {
        RoundingMode::Nearest | RoundingMode::Floor | RoundingMode::Ceil => {
            let n_b = round_with(cont.n_b, mode, 1);
            let n_l = round_with(lp1, mode, 2) - 1;
            candidate(source, d, n_b, n_l)
        }
        RoundingMode::Search | RoundingMode::PaperCompat => {
            let bs = [
                round_with(cont.n_b, RoundingMode::Floor, 1),
                round_with(cont.n_b, RoundingMode::Ceil, 1),
            ];
            let ls = [
                round_with(lp1, RoundingMode::Floor, 2),
                round_with(lp1, RoundingMode::Ceil, 2),
            ];
            let mut best: Option<Candidate> = None;
            for &b in &bs {
                for &l in &ls {
                    let c = candidate(source, d, b, l - 1);
                    // Strict improvement only, so ties keep the smaller model.
                    if best
                        .as_ref()
                        .is_none_or(|cur| (c.ratio - d).abs() < (cur.ratio - d).abs())
                    {
                        best = Some(c);
                    }
                }
            }
            best.expect("at least one candidate")
        }
    };

    let mut warnings = Vec::new();
    let (n_c, n_l, n_b) = match (mode, override_for(source, d)) {
        (RoundingMode::PaperCompat, Some(tgt)) => {
            warnings.push(PlanWarning::OverrideApplied);
            tgt
        }
        _ => {
            if chosen.clamped {
                warn!("planned width below {CHANNEL_MULTIPLE} channels; clamped");
                warnings.push(PlanWarning::ChannelClamped);
            }
            (chosen.n_c, chosen.n_l, chosen.n_b)
        }
    };
    let target = adjust_peripherals(
        source,
        &ModelConfig {
            n_c,
            n_l,
            n_b,
            ..*source
        },
    );
    let achieved_ratio = approx_ratio(source, &target);
    if !(achieved_ratio <= 2.0 * d && achieved_ratio >= d / 2.0) {
        warn!("achieved ratio {achieved_ratio:.4} is not within a factor 2 of d = {d}");
        warnings.push(PlanWarning::RatioOutOfBounds);
    }
    let achieved_exact_ratio =
        ParamCount::for_config(&target).deep as f64 / ParamCount::for_config(source).deep as f64;
    Ok(CompressionPlan {
        source: *source,
        d,
        rounding_mode: mode,
        target,
        continuous: cont,
        achieved_ratio,
        achieved_exact_ratio,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub d: f64,
    pub approx_ratio: f64,
    pub exact_ratio: f64,
    /// `approx_ratio − d`.
    pub approx_deviation: f64,
    /// `exact_ratio − d`.
    pub exact_deviation: f64,
    pub source_params: ParamCount,
    pub target_params: ParamCount,
}

/// Recompute both ratios, the exact one from freshly built models.
pub fn verify_plan(plan: &CompressionPlan) -> Result<VerificationReport> {
    let source_params = SRModel::build(plan.source, 0)?.param_count();
    let target_params = SRModel::build(plan.target, 0)?.param_count();
    let approx_ratio = approx_ratio(&plan.source, &plan.target);
    let exact_ratio = target_params.deep as f64 / source_params.deep as f64;
    Ok(VerificationReport {
        d: plan.d,
        approx_ratio,
        exact_ratio,
        approx_deviation: approx_ratio - plan.d,
        exact_deviation: exact_ratio - plan.d,
        source_params,
        target_params,
    })
}
