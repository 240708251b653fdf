use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved (HWC) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Data(format!(
                "crop {h}x{w} at ({y0}, {x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Trim `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(Error::Data(format!(
                "border {border} leaves no pixels of a {}x{} image",
                self.height, self.width
            )));
        }
        self.crop(
            border,
            border,
            self.height - 2 * border,
            self.width - 2 * border,
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
        .expect("same dims")
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
        .expect("same dims")
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, self.channels, |y, x, c| {
            self.get(x, y, c)
        })
        .expect("same dims")
    }

    /// CHW tensor with a leading batch axis of 1.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            self.data[rest * c + ch]
        })
    }

    /// Image `index` of an NCHW batch.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(Error::shape(format!(
                "batch index {index} out of range for {n}"
            )));
        }
        let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        Self::from_fn(h, w, c, |y, x, ch| plane[(ch * h + y) * w + x])
    }
}

/// Stack equally sized images into an NCHW tensor.
pub fn stack(images: &[ImageBuffer]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty image list".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape("stacked images must share dimensions"));
        }
        data.extend_from_slice(img.to_tensor().data());
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("invalid PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("invalid PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let (src_ch, keep): (usize, usize) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette PNG")),
    };
    let mut data = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * src_ch];
        for px in row.chunks_exact(src_ch) {
            data.extend(px[..keep].iter().map(|&b| b as f32 / 255.0));
        }
    }
    ImageBuffer::new(h, w, keep, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Write an 8-bit PNG storing `round(v · 255)` of the clamped values.
pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, format!("PNG encode failed: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, format!("PNG encode failed: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::format(path, format!("PNG encode failed: {e}")))
}
