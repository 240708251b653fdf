//! PSNR and SSIM on the luma channel.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::color::{as_luma, LumaConvention};
use super::ImageBuffer;
use crate::error::{Error, Result};

/// PSNR in dB; identical images give `+∞`, serialized as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Psnr(pub f64);

impl Psnr {
    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf dB")
        } else {
            write!(f, "{:.4} dB", self.0)
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value `{s}`"))),
        }
    }
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::shape(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` on luma after trimming `border` pixels per side.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, border: usize) -> Result<Psnr> {
    psnr_with(a, b, border, LumaConvention::default())
}

pub fn psnr_with(
    a: &ImageBuffer,
    b: &ImageBuffer,
    border: usize,
    luma: LumaConvention,
) -> Result<Psnr> {
    check_same(a, b)?;
    let ya = as_luma(a, luma)?.shave(border)?;
    let yb = as_luma(b, luma)?.shave(border)?;
    let n = ya.data().len() as f64;
    let mse: f64 = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(Psnr(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable "valid" Gaussian filtering of an h×w plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| taps[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on luma: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, windows fully inside the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_with(a, b, 0, LumaConvention::default())
}

pub fn ssim_with(
    a: &ImageBuffer,
    b: &ImageBuffer,
    border: usize,
    luma: LumaConvention,
) -> Result<f64> {
    check_same(a, b)?;
    let ya = as_luma(a, luma)?.shave(border)?;
    let yb = as_luma(b, luma)?.shave(border)?;
    let (h, w) = (ya.height(), ya.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let pa: Vec<f64> = ya.data().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = yb.data().iter().map(|&v| v as f64).collect();
    let taps = ssim_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };
    let mu_a = filter_valid(&pa, h, w, &taps);
    let mu_b = filter_valid(&pb, h, w, &taps);
    let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
    let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
    let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
