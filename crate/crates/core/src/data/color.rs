use serde::{Deserialize, Serialize};

use super::ImageBuffer;
use crate::error::{Error, Result};

/// Luma definition used for evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LumaConvention {
    /// ITU-R BT.601 studio range, Y ∈ [16/255, 235/255].
    #[default]
    Bt601Limited,
    /// BT.601 weights over the full [0, 1] range.
    Bt601Full,
}

pub fn luma(r: f64, g: f64, b: f64, convention: LumaConvention) -> f64 {
    match convention {
        LumaConvention::Bt601Limited => (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0,
        LumaConvention::Bt601Full => 0.299 * r + 0.587 * g + 0.114 * b,
    }
}

pub fn rgb_to_y(img: &ImageBuffer) -> Result<ImageBuffer> {
    rgb_to_y_with(img, LumaConvention::default())
}

pub fn rgb_to_y_with(img: &ImageBuffer, convention: LumaConvention) -> Result<ImageBuffer> {
    if img.channels() != 3 {
        return Err(Error::Data(format!(
            "luma conversion needs 3 channels, got {}",
            img.channels()
        )));
    }
    ImageBuffer::from_fn(img.height(), img.width(), 1, |y, x, _| {
        luma(
            img.get(y, x, 0) as f64,
            img.get(y, x, 1) as f64,
            img.get(y, x, 2) as f64,
            convention,
        ) as f32
    })
}

/// Single-channel view for metrics: RGB is converted, grey passes through.
pub(crate) fn as_luma(img: &ImageBuffer, convention: LumaConvention) -> Result<ImageBuffer> {
    if img.channels() == 1 {
        Ok(img.clone())
    } else {
        rgb_to_y_with(img, convention)
    }
}
