//! Catmull-Rom bicubic resampling with pixel-centre alignment.
//!
//! When shrinking, the kernel is stretched by the inverse scale so the
//! filter also acts as an anti-aliasing low-pass (the usual `imresize`
//! behaviour used to make LR training pairs). Out-of-range taps replicate
//! the edge pixel and each output's weights are renormalised to sum to 1.

use super::ImageBuffer;
use crate::error::{Error, Result};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps (source index, weight) for each of `out_len` output positions.
pub(crate) fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let w = cubic((center - i as f64) * kscale);
                    (w != 0.0).then(|| (i.clamp(0, in_len as isize - 1) as usize, w))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

pub fn resize_to(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data(format!(
            "resize target {out_h}x{out_w} is empty"
        )));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let cols = contributions(w, out_w);
    let rows = contributions(h, out_h);
    // Horizontal pass into an h × out_w intermediate, kept in f64.
    let mut tmp = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * out_w + ox) * c + ch] = taps
                    .iter()
                    .map(|&(x, wt)| wt * img.get(y, x, ch) as f64)
                    .sum();
            }
        }
    }
    let mut data = vec![0.0f32; out_h * out_w * c];
    for (oy, taps) in rows.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps
                    .iter()
                    .map(|&(y, wt)| wt * tmp[(y * out_w + ox) * c + ch])
                    .sum();
                data[(oy * out_w + ox) * c + ch] = v as f32;
            }
        }
    }
    Ok(ImageBuffer::new(out_h, out_w, c, data)?.clamped())
}

/// Resize by `factor`; output sides are `round(side · factor)`.
pub fn bicubic_resize(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Domain(format!(
            "resize factor must be positive, got {factor}"
        )));
    }
    let out_h = (img.height() as f64 * factor).round() as usize;
    let out_w = (img.width() as f64 * factor).round() as usize;
    resize_to(img, out_h, out_w)
}
