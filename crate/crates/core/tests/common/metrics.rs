//! Scalar reference implementations of the image metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsqueeze::data::{synth, ImageBuffer};

pub fn noisy_pair(seed: u64, h: usize, w: usize, amp: f32) -> (ImageBuffer, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = synth::scene(h, w, &mut rng);
    let mut b = a.clone();
    for v in b.data_mut() {
        *v = (*v + rng.random_range(-amp..amp)).clamp(0.0, 1.0);
    }
    (a, b)
}

pub fn y_of(img: &ImageBuffer) -> Vec<Vec<f64>> {
    (0..img.height())
        .map(|r| {
            (0..img.width())
                .map(|c| {
                    let (red, g, b) = (
                        img.get(r, c, 0) as f64,
                        img.get(r, c, 1) as f64,
                        img.get(r, c, 2) as f64,
                    );
                    // Luma is stored as f32, like every image plane.
                    ((16.0 + 65.481 * red + 128.553 * g + 24.966 * b) / 255.0) as f32 as f64
                })
                .collect()
        })
        .collect()
}

pub fn ref_psnr(a: &ImageBuffer, b: &ImageBuffer, border: usize) -> f64 {
    let (ya, yb) = (y_of(a), y_of(b));
    let (mut se, mut n) = (0.0, 0.0);
    for r in border..a.height() - border {
        for c in border..a.width() - border {
            se += (ya[r][c] - yb[r][c]).powi(2);
            n += 1.0;
        }
    }
    -10.0 * (se / n).log10()
}

/// Direct 11×11 window sums, no separability.
pub fn ref_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (ya, yb) = (y_of(a), y_of(b));
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut count) = (0.0, 0.0);
    for r in 0..=a.height() - 11 {
        for c in 0..=a.width() - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i] * g[j] / norm;
                    let (p, q) = (ya[r + i][c + j], yb[r + i][c + j]);
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}
