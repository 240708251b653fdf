//! Image I/O, degradation, luma conversion, quality metrics and patch sampling.

pub mod color;
mod image;
pub mod metrics;
pub mod patches;
pub mod resize;
pub mod synth;

pub use self::color::{rgb_to_y, rgb_to_y_with, LumaConvention};
pub use self::image::{load_png, save_png, stack, ImageBuffer};
pub use self::metrics::{psnr, psnr_with, ssim, ssim_with, Psnr};
pub use self::patches::{degrade, sample_patches, Batch, ImageSet, PatchSampler, SamplerConfig};
pub use self::resize::{bicubic_resize, resize_to};
