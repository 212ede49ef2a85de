//! Raw numeric kernels behind the autodiff ops. Everything here works on
//! flat NCHW slices; shape bookkeeping lives in `autograd`.

use crate::par;

/// `c = alpha * a · b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`
/// with arbitrary strides (a transposed operand is just swapped strides).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover every index reachable through
    // the given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { ci, h, w, co, k, stride, pad, ho, wo }
    }
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: `x [n, ci, h, w]`, `weight [co, ci, k, k]`.
pub(crate) fn conv_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * g.cols();
    let mut out = vec![0.0; n * out_len];
    if n == 0 {
        return out;
    }
    let (kk, p) = (g.rows(), g.cols());
    par::for_each_chunk(&mut out, out_len, |s, dst| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![0.0; kk * p];
            im2col(xs, g, &mut buf);
            owned = buf;
            &owned
        };
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            g.co,
            kk,
            p,
            1.0,
            weight,
            (kk as isize, 1),
            cols,
            (p as isize, 1),
            beta,
            dst,
            p as isize,
        );
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Convolution backward. Per-sample weight gradients are summed in sample
/// order so the result does not depend on scheduling.
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> ConvGrads {
    let in_len = g.ci * g.h * g.w;
    let (kk, p) = (g.rows(), g.cols());
    let out_len = g.co * p;
    let per_sample = par::map_range(n, |s| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![0.0; kk * p];
            im2col(xs, g, &mut buf);
            owned = buf;
            &owned
        };
        let mut dw = vec![0.0; g.co * kk];
        // dW = dY · colsᵀ
        gemm(
            g.co,
            p,
            kk,
            1.0,
            dys,
            (p as isize, 1),
            cols,
            (1, p as isize),
            0.0,
            &mut dw,
            kk as isize,
        );
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; kk * p];
            // dcols = Wᵀ · dY
            gemm(
                kk,
                g.co,
                p,
                1.0,
                weight,
                (1, kk as isize),
                dys,
                (p as isize, 1),
                0.0,
                &mut dcols,
                p as isize,
            );
            if g.is_pointwise() {
                dcols
            } else {
                let mut dxs = vec![0.0; in_len];
                col2im(&dcols, g, &mut dxs);
                dxs
            }
        });
        (dw, dx)
    });
    let mut dw = vec![0.0; g.co * kk];
    let mut db = vec![0.0; g.co];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (s, (dws, dxs)) in per_sample.into_iter().enumerate() {
        for (a, b) in dw.iter_mut().zip(&dws) {
            *a += b;
        }
        let dys = &dy[s * out_len..(s + 1) * out_len];
        for (co, chunk) in dys.chunks(p).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        if let (Some(acc), Some(d)) = (dx.as_mut(), dxs) {
            acc.extend_from_slice(&d);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-axis bilinear sampling table (half-pixel centres, edge clamped).
#[derive(Clone, Debug)]
pub(crate) struct AxisWeights {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_weights(input: usize, output: usize) -> AxisWeights {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
    }
    AxisWeights { lo, hi, frac }
}

/// Bilinear resize of `planes` consecutive `h×w` planes to `oh×ow`.
pub(crate) fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ay = axis_weights(h, oh);
    let ax = axis_weights(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(dy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ay = axis_weights(h, oh);
    let ax = axis_weights(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// 3×3 stride-2 max pooling with padding 1. Returns values and the flat
/// argmax index (within the plane) of every output.
pub(crate) fn maxpool_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            bi = i;
                        }
                    }
                }
                out.push(best);
                arg.push(bi as u32);
            }
        }
    }
    (out, arg, oh, ow)
}
