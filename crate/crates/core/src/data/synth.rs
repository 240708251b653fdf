//! Procedural test imagery: gradients, anti-aliased shapes and gratings.
//! Stands in for natural-image training sets at toy scale.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::save_png;
use super::ImageBuffer;
use crate::error::{Error, Result};

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy)]
enum Fill {
    Solid([f32; 3]),
    Grating {
        a: [f32; 3],
        b: [f32; 3],
        freq: f32,
        angle: f32,
        phase: f32,
    },
}

impl Fill {
    fn at(&self, x: f32, y: f32) -> [f32; 3] {
        match *self {
            Fill::Solid(c) => c,
            Fill::Grating {
                a,
                b,
                freq,
                angle,
                phase,
            } => {
                let t = 0.5 + 0.5 * ((x * angle.cos() + y * angle.sin()) * freq + phase).sin();
                [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disc {
        cx: f32,
        cy: f32,
        r: f32,
    },
    Ring {
        cx: f32,
        cy: f32,
        r: f32,
        width: f32,
    },
    Rect {
        cx: f32,
        cy: f32,
        hw: f32,
        hh: f32,
        cos: f32,
        sin: f32,
    },
    Triangle {
        p: [(f32, f32); 3],
    },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Ring { cx, cy, r, width } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (d - r).abs() <= width
            }
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= hw && (-dx * sin + dy * cos).abs() <= hh
            }
            Shape::Triangle { p } => {
                let edge = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let (e0, e1, e2) = (edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One `height × width` RGB scene from `rng`.
pub fn scene(height: usize, width: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let (h, w) = (height as f32, width as f32);
    let (c0, c1) = (color(rng), color(rng));
    let ga: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let n_shapes = rng.random_range(4..10);
    let mut layers = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let size = rng.random_range(0.08..0.35) * h.min(w);
        let shape = match rng.random_range(0..4) {
            0 => Shape::Disc { cx, cy, r: size },
            1 => Shape::Ring {
                cx,
                cy,
                r: size,
                width: rng.random_range(1.0..4.0),
            },
            2 => {
                let a: f32 = rng.random_range(0.0..std::f32::consts::PI);
                Shape::Rect {
                    cx,
                    cy,
                    hw: size,
                    hh: size * rng.random_range(0.2..1.0),
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
            _ => Shape::Triangle {
                p: [0, 1, 2].map(|_| {
                    (
                        cx + rng.random_range(-size..size),
                        cy + rng.random_range(-size..size),
                    )
                }),
            },
        };
        let fill = if rng.random_bool(0.35) {
            Fill::Grating {
                a: color(rng),
                b: color(rng),
                freq: rng.random_range(0.3..1.6),
                angle: rng.random_range(0.0..std::f32::consts::PI),
                phase: rng.random_range(0.0..std::f32::consts::TAU),
            }
        } else {
            Fill::Solid(color(rng))
        };
        layers.push((shape, fill));
    }

    let ss = SUPERSAMPLE as f32;
    ImageBuffer::from_fn(height, width, 3, |_, _, _| 0.0)
        .map(|mut img| {
            let data = img.data_mut();
            for py in 0..height {
                for px in 0..width {
                    let mut acc = [0.0f32; 3];
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let x = px as f32 + (sx as f32 + 0.5) / ss;
                            let y = py as f32 + (sy as f32 + 0.5) / ss;
                            let t =
                                0.5 + 0.5 * ((x / w - 0.5) * ga.cos() + (y / h - 0.5) * ga.sin());
                            let mut c = [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * t);
                            for (shape, fill) in &layers {
                                if shape.contains(x, y) {
                                    c = fill.at(x, y);
                                }
                            }
                            for i in 0..3 {
                                acc[i] += c[i];
                            }
                        }
                    }
                    let base = (py * width + px) * 3;
                    for i in 0..3 {
                        data[base + i] = (acc[i] / (ss * ss)).clamp(0.0, 1.0);
                    }
                }
            }
            img
        })
        .expect("positive dims")
}

/// Write `count` scenes named `img_000.png`, … into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Data(
            "synthetic images need positive dimensions".into(),
        ));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        save_png(
            &scene(height, width, &mut rng),
            dir.join(format!("img_{i:03}.png")),
        )?;
    }
    Ok(())
}
