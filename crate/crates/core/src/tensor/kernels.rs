//! Raw slice kernels behind the tape operations. Shapes are validated by the
//! callers; these functions only index.

use super::ReduceMode;

/// Geometry of one 2D convolution over a single frame.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // establishes from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `kj` lands inside the row.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.ow);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
    (lo, hi)
}

/// Unfolds one `[c_in, h, w]` frame into a `[c_in·kh·kw, oh·ow]` patch matrix.
pub(crate) fn im2col(g: &ConvGeom, frame: &[f64], cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto a frame.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], frame: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            let row = &src[oy * g.ow + lo..oy * g.ow + hi];
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of `frames` stacked frames.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    frames: usize,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = g.out_pixels();
    let kk = g.patch_len();
    let mut out = vec![0.0; frames * g.out_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for f in 0..frames {
        let frame = &input[f * g.in_len()..(f + 1) * g.in_len()];
        let dst = &mut out[f * g.out_len()..(f + 1) * g.out_len()];
        let patches: &[f64] = if g.is_pointwise() {
            frame
        } else {
            im2col(g, frame, &mut cols);
            &cols
        };
        gemm(g.c_out, kk, p, kernel, kk, 1, patches, p, 1, 0.0, dst, p, 1);
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    frames: usize,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    mut d_kernel: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
    mut d_input: Option<&mut [f64]>,
) {
    let p = g.out_pixels();
    let kk = g.patch_len();
    let mut cols = vec![0.0; kk * p];
    for f in 0..frames {
        let up = &upstream[f * g.out_len()..(f + 1) * g.out_len()];
        if let Some(db) = d_bias.as_deref_mut() {
            for (o, row) in up.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            let frame = &input[f * g.in_len()..(f + 1) * g.in_len()];
            let patches: &[f64] = if g.is_pointwise() {
                frame
            } else {
                im2col(g, frame, &mut cols);
                &cols
            };
            // dK[o, r] += Σ_p up[o, p] · patches[r, p]
            gemm(g.c_out, p, kk, up, p, 1, patches, 1, p, 1.0, dk, kk, 1);
        }
        if let Some(dx) = d_input.as_deref_mut() {
            let dst = &mut dx[f * g.in_len()..(f + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(kk, g.c_out, p, kernel, 1, kk, up, p, 1, 1.0, dst, p, 1);
            } else {
                gemm(
                    kk, g.c_out, p, kernel, 1, kk, up, p, 1, 0.0, &mut cols, p, 1,
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
}

/// Temporal 3-tap convolution. `kernel` is `[c_out, c_in, 3]` flattened.
pub(crate) fn conv3d_t3_forward(
    n: usize,
    c_in: usize,
    c_out: usize,
    hw: usize,
    input: &[f64],
    kernel: &[f64],
) -> Vec<f64> {
    let in_len = c_in * hw;
    let out_len = c_out * hw;
    let mut out = vec![0.0; n * out_len];
    for t in 0..n {
        let dst = &mut out[t * out_len..(t + 1) * out_len];
        for d in 0..3 {
            let Some(src) = (t + d).checked_sub(1).filter(|&s| s < n) else {
                continue;
            };
            let frame = &input[src * in_len..(src + 1) * in_len];
            gemm(
                c_out,
                c_in,
                hw,
                &kernel[d..],
                3 * c_in,
                3,
                frame,
                hw,
                1,
                1.0,
                dst,
                hw,
                1,
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_t3_backward(
    n: usize,
    c_in: usize,
    c_out: usize,
    hw: usize,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    mut d_kernel: Option<&mut [f64]>,
    mut d_input: Option<&mut [f64]>,
) {
    let in_len = c_in * hw;
    let out_len = c_out * hw;
    for t in 0..n {
        let up = &upstream[t * out_len..(t + 1) * out_len];
        for d in 0..3 {
            let Some(src) = (t + d).checked_sub(1).filter(|&s| s < n) else {
                continue;
            };
            if let Some(dk) = d_kernel.as_deref_mut() {
                let frame = &input[src * in_len..(src + 1) * in_len];
                gemm(
                    c_out,
                    hw,
                    c_in,
                    up,
                    hw,
                    1,
                    frame,
                    1,
                    hw,
                    1.0,
                    &mut dk[d..],
                    3 * c_in,
                    3,
                );
            }
            if let Some(dx) = d_input.as_deref_mut() {
                let dst = &mut dx[src * in_len..(src + 1) * in_len];
                gemm(
                    c_in,
                    c_out,
                    hw,
                    &kernel[d..],
                    3,
                    3 * c_in,
                    up,
                    hw,
                    1,
                    1.0,
                    dst,
                    hw,
                    1,
                );
            }
        }
    }
}

/// Per-output bookkeeping a reduction needs for its backward pass.
#[derive(Clone, Debug)]
pub(crate) enum ReducePicks {
    Mean,
    /// Index along the reduced axis of the (first) maximum.
    Max(Vec<u32>),
    /// Indices along the axis of the two middle order statistics (equal for odd counts).
    Median(Vec<[u32; 2]>),
}

/// Reduces `[outer, len, inner]` to `[outer, inner]`.
pub(crate) fn reduce_forward(
    outer: usize,
    len: usize,
    inner: usize,
    input: &[f64],
    mode: ReduceMode,
) -> (Vec<f64>, ReducePicks) {
    let mut out = vec![0.0; outer * inner];
    match mode {
        ReduceMode::Mean => {
            // Running mean: a constant slice reduces to exactly that constant.
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let src = &input[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let k = (l + 1) as f64;
                    dst.iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += (s - *d) / k);
                }
            }
            (out, ReducePicks::Mean)
        }
        ReduceMode::Max => {
            let mut picks = vec![0u32; outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                let pk = &mut picks[o * inner..(o + 1) * inner];
                dst.copy_from_slice(&input[o * len * inner..(o * len + 1) * inner]);
                for l in 1..len {
                    let src = &input[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for i in 0..inner {
                        if src[i] > dst[i] {
                            dst[i] = src[i];
                            pk[i] = l as u32;
                        }
                    }
                }
            }
            (out, ReducePicks::Max(picks))
        }
        ReduceMode::Median => {
            let mut picks = vec![[0u32; 2]; outer * inner];
            let mut order: Vec<u32> = Vec::with_capacity(len);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: u32| input[(o * len + l as usize) * inner + i];
                    order.clear();
                    order.extend(0..len as u32);
                    // Stable sort keeps equal values in axis order, which
                    // makes the middle picks deterministic.
                    order.sort_by(|&a, &b| at(a).total_cmp(&at(b)));
                    let pick = if len % 2 == 1 {
                        [order[len / 2]; 2]
                    } else {
                        [order[len / 2 - 1], order[len / 2]]
                    };
                    out[o * inner + i] = 0.5 * (at(pick[0]) + at(pick[1]));
                    picks[o * inner + i] = pick;
                }
            }
            (out, ReducePicks::Median(picks))
        }
    }
}

pub(crate) fn reduce_backward(
    outer: usize,
    len: usize,
    inner: usize,
    picks: &ReducePicks,
    upstream: &[f64],
    d_input: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let up = upstream[o * inner + i];
            let at = |l: usize| (o * len + l) * inner + i;
            match picks {
                ReducePicks::Mean => {
                    let share = up / len as f64;
                    for l in 0..len {
                        d_input[at(l)] += share;
                    }
                }
                ReducePicks::Max(p) => d_input[at(p[o * inner + i] as usize)] += up,
                ReducePicks::Median(p) => {
                    let [lo, hi] = p[o * inner + i];
                    if lo == hi {
                        d_input[at(lo as usize)] += up;
                    } else {
                        d_input[at(lo as usize)] += 0.5 * up;
                        d_input[at(hi as usize)] += 0.5 * up;
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling over the trailing two axes of `planes` stacked `[h, w]` planes.
/// Returns the pooled values and, per output, the flat input index of the first maximum.
pub(crate) fn max_pool2x2_forward(
    planes: usize,
    h: usize,
    w: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if input[c] > input[best] {
                        best = c;
                    }
                }
                let o = (p * oh + y) * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}
