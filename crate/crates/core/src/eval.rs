//! Y-channel PSNR/SSIM of a model on held-out HR images, with the bicubic
//! upscaler as a baseline.

use serde::{Deserialize, Serialize};

use crate::data::{psnr_with, resize_to, ssim_with, ImageBuffer, ImageSet, LumaConvention, Psnr};
use crate::error::{Error, Result};
use crate::model::SRModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub bicubic_psnr: Psnr,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scale: usize,
    pub border: usize,
    pub luma: LumaConvention,
    pub images: Vec<ImageEval>,
    pub mean_psnr: Psnr,
    pub mean_ssim: f64,
    pub mean_bicubic_psnr: Psnr,
    pub mean_bicubic_ssim: f64,
}

/// LR input and HR reference for `hr`, cropped to a multiple of `scale`.
pub fn eval_pair(hr: &ImageBuffer, scale: usize) -> Result<(ImageBuffer, ImageBuffer)> {
    let (h, w) = (hr.height() / scale * scale, hr.width() / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::Data(format!(
            "{}x{} image is smaller than the x{scale} factor",
            hr.height(),
            hr.width()
        )));
    }
    let hr = hr.crop(0, 0, h, w)?;
    let lr = resize_to(&hr, h / scale, w / scale)?;
    Ok((lr, hr))
}

/// Super-resolve a single image.
pub fn upscale(model: &SRModel, lr: &ImageBuffer) -> Result<ImageBuffer> {
    let out = model.predict(&lr.to_tensor())?;
    Ok(ImageBuffer::from_tensor(&out, 0)?.clamped())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Evaluate on every image of `set`; `border` defaults to the scale factor.
pub fn evaluate(model: &SRModel, set: &ImageSet, border: Option<usize>) -> Result<EvalResult> {
    if set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let scale = model.config().scale;
    let border = border.unwrap_or(scale);
    let luma = LumaConvention::default();
    let mut images = Vec::with_capacity(set.len());
    for (name, img) in set.names().iter().zip(set.images()) {
        let (lr, hr) = eval_pair(img, scale)?;
        let sr = upscale(model, &lr)?;
        let bic = resize_to(&lr, hr.height(), hr.width())?;
        images.push(ImageEval {
            name: name.clone(),
            psnr: psnr_with(&sr, &hr, border, luma)?,
            ssim: ssim_with(&sr, &hr, border, luma)?,
            bicubic_psnr: psnr_with(&bic, &hr, border, luma)?,
            bicubic_ssim: ssim_with(&bic, &hr, border, luma)?,
        });
    }
    Ok(EvalResult {
        scale,
        border,
        luma,
        mean_psnr: Psnr(mean(images.iter().map(|e| e.psnr.0))),
        mean_ssim: mean(images.iter().map(|e| e.ssim)),
        mean_bicubic_psnr: Psnr(mean(images.iter().map(|e| e.bicubic_psnr.0))),
        mean_bicubic_ssim: mean(images.iter().map(|e| e.bicubic_ssim)),
        images,
    })
}
