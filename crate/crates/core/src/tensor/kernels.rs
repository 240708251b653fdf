//! Slice-level forward/backward kernels used by the autodiff graph.
//!
//! Convolutions lower each sample to an im2col matrix and multiply in f64,
//! so every inner product accumulates in double precision.

use crate::exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// `dst = a (m×k) · b (k×n)`, all row-major f64.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(dst.len(), m * n);
    // SAFETY: slice lengths checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            dst.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `dst = aᵀ · b` where `a` is stored k×m.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    // SAFETY: as in `gemm`; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            dst.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `dst = a · bᵀ` where `b` is stored n×k.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    // SAFETY: as in `gemm`; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            dst.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize] as f64
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let plane = g.out_plane();
    let ckk = g.ckk();
    let w64 = to_f64(w);
    let mut out = vec![0.0f32; g.n * g.o * plane];
    exec::for_each_chunk(&mut out, g.o * plane, |i, chunk| {
        let xs = &x[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
        let mut cols = vec![0.0f64; ckk * plane];
        im2col(g, xs, &mut cols);
        let mut acc = vec![0.0f64; g.o * plane];
        gemm(g.o, ckk, plane, &w64, &cols, &mut acc);
        for oc in 0..g.o {
            let bias = b.map_or(0.0, |b| b[oc] as f64);
            for (d, &s) in chunk[oc * plane..(oc + 1) * plane]
                .iter_mut()
                .zip(&acc[oc * plane..(oc + 1) * plane])
            {
                *d = (s + bias) as f32;
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_w, need_b) = need;
    let plane = g.out_plane();
    let ckk = g.ckk();
    let in_len = g.c * g.h * g.w;

    let dx = need_x.then(|| {
        let w64 = to_f64(w);
        let mut dx = vec![0.0f32; g.n * in_len];
        exec::for_each_chunk(&mut dx, in_len, |i, chunk| {
            let dys = to_f64(&dy[i * g.o * plane..(i + 1) * g.o * plane]);
            let mut cols = vec![0.0f64; ckk * plane];
            gemm_at(ckk, g.o, plane, &w64, &dys, &mut cols);
            let mut acc = vec![0.0f64; in_len];
            col2im(g, &cols, &mut acc);
            for (d, s) in chunk.iter_mut().zip(acc) {
                *d = s as f32;
            }
        });
        dx
    });

    let dw = need_w.then(|| {
        let partials = exec::map_collect(g.n, |i| {
            let xs = &x[i * in_len..(i + 1) * in_len];
            let mut cols = vec![0.0f64; ckk * plane];
            im2col(g, xs, &mut cols);
            let dys = to_f64(&dy[i * g.o * plane..(i + 1) * g.o * plane]);
            let mut part = vec![0.0f64; g.o * ckk];
            gemm_bt(g.o, plane, ckk, &dys, &cols, &mut part);
            part
        });
        let mut total = vec![0.0f64; g.o * ckk];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total.into_iter().map(|v| v as f32).collect()
    });

    let db = need_b.then(|| {
        let mut acc = vec![0.0f64; g.o];
        for i in 0..g.n {
            for (oc, a) in acc.iter_mut().enumerate() {
                let base = (i * g.o + oc) * plane;
                *a += dy[base..base + plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    });

    ConvGrads { dx, dw, db }
}

/// Index of a reflected coordinate (edge pixel not repeated). Handles any
/// overhang, including planes a single pixel wide.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source index for each padded coordinate; `None` marks zero padding.
pub(crate) fn pad_map(n: usize, pad: usize, reflect: bool) -> Vec<Option<usize>> {
    (0..n + 2 * pad)
        .map(|p| {
            let i = p as isize - pad as isize;
            if reflect {
                Some(reflect_index(i, n))
            } else if i >= 0 && (i as usize) < n {
                Some(i as usize)
            } else {
                None
            }
        })
        .collect()
}

pub(crate) fn pad_forward(
    planes: usize,
    h: usize,
    w: usize,
    x: &[f32],
    pad: usize,
    reflect: bool,
) -> Vec<f32> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let ym = pad_map(h, pad, reflect);
    let xm = pad_map(w, pad, reflect);
    let mut out = vec![0.0f32; planes * ph * pw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
        for (oy, sy) in ym.iter().enumerate() {
            let Some(sy) = sy else { continue };
            for (ox, sx) in xm.iter().enumerate() {
                if let Some(sx) = sx {
                    dst[oy * pw + ox] = src[sy * w + sx];
                }
            }
        }
    }
    out
}

pub(crate) fn pad_backward(
    planes: usize,
    h: usize,
    w: usize,
    dy: &[f32],
    pad: usize,
    reflect: bool,
) -> Vec<f32> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let ym = pad_map(h, pad, reflect);
    let xm = pad_map(w, pad, reflect);
    let mut acc = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ph * pw..(p + 1) * ph * pw];
        let dst = &mut acc[p * h * w..(p + 1) * h * w];
        for (oy, sy) in ym.iter().enumerate() {
            let Some(sy) = sy else { continue };
            for (ox, sx) in xm.iter().enumerate() {
                if let Some(sx) = sx {
                    dst[sy * w + sx] += src[oy * pw + ox] as f64;
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Valid (unpadded) correlation of every plane with one fixed k×k kernel.
pub(crate) fn depthwise_forward(
    planes: usize,
    h: usize,
    w: usize,
    x: &[f32],
    kernel: &[f32],
    k: usize,
) -> Vec<f32> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![0.0f32; planes * oh * ow];
    exec::for_each_chunk(&mut out, oh * ow, |p, dst| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let row = &src[(oy + ky) * w + ox..(oy + ky) * w + ox + k];
                    for (kx, &v) in row.iter().enumerate() {
                        acc += kernel[ky * k + kx] as f64 * v as f64;
                    }
                }
                dst[oy * ow + ox] = acc as f32;
            }
        }
    });
    out
}

pub(crate) fn depthwise_backward(
    planes: usize,
    h: usize,
    w: usize,
    dy: &[f32],
    kernel: &[f32],
    k: usize,
) -> Vec<f32> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut dx = vec![0.0f32; planes * h * w];
    exec::for_each_chunk(&mut dx, h * w, |p, dst| {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let mut acc = vec![0.0f64; h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox] as f64;
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        acc[(oy + ky) * w + ox + kx] += kernel[ky * k + kx] as f64 * gv;
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    dx
}

/// (n, c·r², h, w) → (n, c, h·r, w·r).
pub(crate) fn pixel_shuffle(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    x: &[f32],
) -> Vec<f32> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for co in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    let src = &x[((b * c * r * r) + ci) * h * w..][..h * w];
                    let dst = &mut out[(b * c + co) * oh * ow..][..oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + i) * ow + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]: (n, c, h·r, w·r) → (n, c·r², h, w).
pub(crate) fn pixel_unshuffle(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    x: &[f32],
) -> Vec<f32> {
    let (ih, iw) = (h * r, w * r);
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for co in 0..c {
            let src = &x[(b * c + co) * ih * iw..][..ih * iw];
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    let dst = &mut out[((b * c * r * r) + ci) * h * w..][..h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y * r + i) * iw + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Keep every second pixel starting at the origin.
pub(crate) fn decimate2(planes: usize, h: usize, w: usize, x: &[f32]) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + 2 * y) * w + 2 * xx];
            }
        }
    }
    (out, oh, ow)
}

/// Zero-insertion upsampling of a (h, w) plane into (th, tw); the inverse
/// scatter of [`decimate2`].
pub(crate) fn zero_insert2(
    planes: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    x: &[f32],
) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * th * tw];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(p * th + 2 * y) * tw + 2 * xx] = x[(p * h + y) * w + xx];
            }
        }
    }
    out
}
