//! Spatial kernels: im2col convolution backed by dgemm, per-sample dynamic
//! grouped filters, pooling and resampling. Forward and backward paths write
//! disjoint per-sample output slices, so rayon parallelism stays bit
//! deterministic.

use rayon::prelude::*;

use crate::tensor::graph::dims4;
use crate::tensor::Tensor;

// Below this flop count a direct loop beats the dgemm dispatch overhead;
// attention windows produce many such tiny products.
const SMALL_GEMM: usize = 16 * 1024;

/// Row-major C = A(m x k) @ B(k x n), accumulating into zeroed `out`.
pub fn dgemm_rm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        out.fill(0.0);
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut out[i * n..(i + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        return;
    }
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A(m x k) @ B(n x k)^T; `b` is stored row-major (n, k).
pub fn dgemm_rm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        return;
    }
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A(k x m)^T @ B(k x n); `a` is stored row-major (k, m).
pub fn dgemm_rm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        out.fill(0.0);
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = arow[i];
                let crow = &mut out[i * n..(i + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        return;
    }
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Valid output-column span for kernel offset `kx`: the `ox` range whose
/// source index `ox*stride + kx - pad` lands inside `[0, w)`.
#[inline]
fn valid_span(w: usize, ow: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Gather conv patches into a freshly built (Cin*kh*kw, OH*OW) row-major
/// buffer, written strictly in order so no upfront zeroing is needed.
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let l = oh * ow;
    let mut cols = Vec::with_capacity(cin * kh * kw * l);
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let (lo, hi) = valid_span(w, ow, stride, pad, kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        cols.extend(std::iter::repeat_n(0.0, ow));
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    cols.extend(std::iter::repeat_n(0.0, lo));
                    let start = src_row + lo * stride + kx - pad;
                    if stride == 1 {
                        cols.extend_from_slice(&x[start..start + (hi - lo)]);
                    } else {
                        cols.extend(
                            x[start..src_row + w]
                                .iter()
                                .step_by(stride)
                                .take(hi - lo)
                                .copied(),
                        );
                    }
                    cols.extend(std::iter::repeat_n(0.0, ow - hi));
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), cin * kh * kw * l);
    cols
}

/// Scatter-add the column view back to image layout.
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let l = oh * ow;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * l;
                let (lo, hi) = valid_span(w, ow, stride, pad, kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    let src = &cols[row + oy * ow + lo..row + oy * ow + hi];
                    let start = dst_row + lo * stride + kx - pad;
                    if stride == 1 {
                        for (dst, &v) in x[start..start + (hi - lo)].iter_mut().zip(src) {
                            *dst += v;
                        }
                    } else {
                        for (dst, &v) in x[start..dst_row + w].iter_mut().step_by(stride).zip(src) {
                            *dst += v;
                        }
                    }
                }
            }
        }
    }
}

/// `(B, Cin, H, W) * (Cout, Cin, kh, kw) + bias(Cout) -> (B, Cout, OH, OW)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, cin, h, wd] = dims4(x);
    let [cout, cin2, kh, kw] = dims4(w);
    assert_eq!(cin, cin2, "conv2d channel mismatch");
    assert_eq!(bias.shape(), &[cout], "conv2d bias shape");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let l = oh * ow;
    let krows = cin * kh * kw;
    let mut out = vec![0.0; b * cout * l];
    let xd = x.data();
    let wdat = w.data();
    let bd = bias.data();
    out.par_chunks_exact_mut(cout * l)
        .enumerate()
        .for_each(|(bi, out_s)| {
            let cols = im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, kh, kw, stride, pad);
            dgemm_rm(cout, krows, l, wdat, &cols, out_s);
            for co in 0..cout {
                let base = co * l;
                for v in out_s[base..base + l].iter_mut() {
                    *v += bd[co];
                }
            }
        });
    Tensor::from_vec(&[b, cout, oh, ow], out)
}

pub fn conv2d_backward_input(
    grad_out: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let [b, cout, oh, ow] = dims4(grad_out);
    let (cin, h, wd) = (x_shape[1], x_shape[2], x_shape[3]);
    let [_, _, kh, kw] = dims4(w);
    let l = oh * ow;
    let krows = cin * kh * kw;
    let gd = grad_out.data();
    let wdat = w.data();
    let mut dx = vec![0.0; b * cin * h * wd];
    dx.par_chunks_exact_mut(cin * h * wd)
        .enumerate()
        .for_each(|(bi, dx_s)| {
            // dcols = w^T (krows x cout) @ g (cout x l)
            let mut dcols = vec![0.0; krows * l];
            dgemm_rm_tn(krows, cout, l, wdat, &gd[bi * cout * l..(bi + 1) * cout * l], &mut dcols);
            col2im(&dcols, cin, h, wd, kh, kw, stride, pad, dx_s);
        });
    Tensor::from_vec(x_shape, dx)
}

pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let [b, cout, oh, ow] = dims4(grad_out);
    let [_, cin, h, wd] = dims4(x);
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let l = oh * ow;
    let krows = cin * kh * kw;
    let gd = grad_out.data();
    let xd = x.data();
    // per-sample partials, reduced in fixed order for determinism
    let partials: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, kh, kw, stride, pad);
            let mut dw = vec![0.0; cout * krows];
            // dw = g (cout x l) @ cols^T (l x krows)
            dgemm_rm_nt(cout, l, krows, &gd[bi * cout * l..(bi + 1) * cout * l], &cols, &mut dw);
            dw
        })
        .collect();
    let mut dw = vec![0.0; cout * krows];
    for part in partials {
        for (d, p) in dw.iter_mut().zip(part.iter()) {
            *d += p;
        }
    }
    Tensor::from_vec(w_shape, dw)
}

pub fn conv2d_backward_bias(grad_out: &Tensor) -> Tensor {
    let [b, cout, oh, ow] = dims4(grad_out);
    let l = oh * ow;
    let gd = grad_out.data();
    let mut db = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let base = (bi * cout + co) * l;
            db[co] += gd[base..base + l].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[cout], db)
}

/// Forward of the dynamic grouped filter: centered cross-correlation with
/// zero padding, kernels `(B, G, k, k)`, channel group `j` of each sample
/// convolved with its own kernel.
pub fn dyn_group_conv_forward(x: &Tensor, kernels: &Tensor) -> Tensor {
    let [b, c, h, w] = dims4(x);
    let [kb, g, kh, kw] = dims4(kernels);
    assert_eq!(kb, b, "dyn_group_conv batch mismatch");
    assert_eq!(c % g, 0, "channels {c} not divisible by groups {g}");
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sizes must be odd");
    let cg = c / g;
    let (cy, cx) = (kh as isize / 2, kw as isize / 2);
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![0.0; x.len()];
    out.par_chunks_exact_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, out_s)| {
            for gi in 0..g {
                let kern = &kd[((bi * g) + gi) * kh * kw..((bi * g) + gi + 1) * kh * kw];
                for cc in 0..cg {
                    let ci = gi * cg + cc;
                    let xoff = (bi * c + ci) * h * w;
                    let ooff = ci * h * w;
                    for y in 0..h as isize {
                        for xq in 0..w as isize {
                            let mut acc = 0.0;
                            for p in -cy..=cy {
                                let sy = y + p;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for q in -cx..=cx {
                                    let sx = xq + q;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let kidx = ((p + cy) * kw as isize + (q + cx)) as usize;
                                    acc += kern[kidx] * xd[xoff + sy as usize * w + sx as usize];
                                }
                            }
                            out_s[ooff + y as usize * w + xq as usize] = acc;
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&[b, c, h, w], out)
}

pub fn dyn_group_conv_backward_input(grad_out: &Tensor, kernels: &Tensor) -> Tensor {
    let [b, c, h, w] = dims4(grad_out);
    let [_, g, kh, kw] = dims4(kernels);
    let cg = c / g;
    let (cy, cx) = (kh as isize / 2, kw as isize / 2);
    let gd = grad_out.data();
    let kd = kernels.data();
    let mut dx = vec![0.0; grad_out.len()];
    dx.par_chunks_exact_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, dx_s)| {
            for gi in 0..g {
                let kern = &kd[((bi * g) + gi) * kh * kw..((bi * g) + gi + 1) * kh * kw];
                for cc in 0..cg {
                    let ci = gi * cg + cc;
                    let goff = (bi * c + ci) * h * w;
                    let ooff = ci * h * w;
                    // transpose of cross-correlation: dx[u] += k[p] * g[u - p]
                    for y in 0..h as isize {
                        for xq in 0..w as isize {
                            let mut acc = 0.0;
                            for p in -cy..=cy {
                                let sy = y - p;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for q in -cx..=cx {
                                    let sx = xq - q;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let kidx = ((p + cy) * kw as isize + (q + cx)) as usize;
                                    acc += kern[kidx] * gd[goff + sy as usize * w + sx as usize];
                                }
                            }
                            dx_s[ooff + y as usize * w + xq as usize] = acc;
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&[b, c, h, w], dx)
}

/// Kernel gradient for the dynamic grouped filter.
pub fn dyn_group_conv_backward_kernels(
    grad_out: &Tensor,
    x: &Tensor,
    g: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let [b, c, h, w] = dims4(grad_out);
    let cg = c / g;
    let (cy, cx) = (kh as isize / 2, kw as isize / 2);
    let gd = grad_out.data();
    let xd = x.data();
    let mut dk = vec![0.0; b * g * kh * kw];
    dk.par_chunks_exact_mut(g * kh * kw)
        .enumerate()
        .for_each(|(bi, dk_s)| {
            for gi in 0..g {
                for cc in 0..cg {
                    let ci = gi * cg + cc;
                    let goff = (bi * c + ci) * h * w;
                    let xoff = (bi * c + ci) * h * w;
                    for p in -cy..=cy {
                        for q in -cx..=cx {
                            let kidx = (gi * kh * kw) as isize
                                + (p + cy) * kw as isize
                                + (q + cx);
                            let mut acc = 0.0;
                            for y in 0..h as isize {
                                let sy = y + p;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xq in 0..w as isize {
                                    let sx = xq + q;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += gd[goff + y as usize * w + xq as usize]
                                        * xd[xoff + sy as usize * w + sx as usize];
                                }
                            }
                            dk_s[kidx as usize] += acc;
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&[b, g, kh, kw], dk)
}

/// Non-overlapping average pooling with kernel `(kh, kw)` and equal stride.
pub fn avg_pool2d_forward(x: &Tensor, kh: usize, kw: usize) -> Tensor {
    let [b, c, h, w] = dims4(x);
    assert!(h % kh == 0 && w % kw == 0, "avg_pool2d needs exact tiling");
    let (oh, ow) = (h / kh, w / kw);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    let inv = 1.0 / (kh * kw) as f64;
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let row = src + (oy * kh + ky) * w + ox * kw;
                    acc += xd[row..row + kw].iter().sum::<f64>();
                }
                out[dst + oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn avg_pool2d_backward(grad_out: &Tensor, x_shape: &[usize], kh: usize, kw: usize) -> Tensor {
    let [b, c, oh, ow] = dims4(grad_out);
    let (h, w) = (x_shape[2], x_shape[3]);
    let gd = grad_out.data();
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let src = bc * oh * ow;
        let dst = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gd[src + oy * ow + ox] * inv;
                for ky in 0..kh {
                    let row = dst + (oy * kh + ky) * w + ox * kw;
                    for v in dx[row..row + kw].iter_mut() {
                        *v += gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

pub fn upsample_nearest_forward(x: &Tensor, fh: usize, fw: usize) -> Tensor {
    let [b, c, h, w] = dims4(x);
    let (oh, ow) = (h * fh, w * fw);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * oh * ow;
        for oy in 0..oh {
            let sy = oy / fh;
            for ox in 0..ow {
                out[dst + oy * ow + ox] = xd[src + sy * w + ox / fw];
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor, x_shape: &[usize], fh: usize, fw: usize) -> Tensor {
    let [b, c, oh, ow] = dims4(grad_out);
    let (h, w) = (x_shape[2], x_shape[3]);
    let gd = grad_out.data();
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let src = bc * oh * ow;
        let dst = bc * h * w;
        for oy in 0..oh {
            let sy = oy / fh;
            for ox in 0..ow {
                dx[dst + sy * w + ox / fw] += gd[src + oy * ow + ox];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Bilinear resize with half-pixel centers and edge clamping; the standard
/// align_corners=false convention.
fn bilinear_taps(out_dim: usize, in_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_dim - 1);
            let hi = (lo + 1).min(in_dim - 1);
            let frac = (src - lo as f64).clamp(0.0, 1.0);
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [b, c, h, w] = dims4(x);
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let xd = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * oh * ow;
        for (oy, &(ylo, yhi, fy)) in ytaps.iter().enumerate() {
            for (ox, &(xlo, xhi, fx)) in xtaps.iter().enumerate() {
                let v00 = xd[src + ylo * w + xlo];
                let v01 = xd[src + ylo * w + xhi];
                let v10 = xd[src + yhi * w + xlo];
                let v11 = xd[src + yhi * w + xhi];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[dst + oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn bilinear_backward(grad_out: &Tensor, x_shape: &[usize]) -> Tensor {
    let [b, c, oh, ow] = dims4(grad_out);
    let (h, w) = (x_shape[2], x_shape[3]);
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let gd = grad_out.data();
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let src = bc * oh * ow;
        let dst = bc * h * w;
        for (oy, &(ylo, yhi, fy)) in ytaps.iter().enumerate() {
            for (ox, &(xlo, xhi, fx)) in xtaps.iter().enumerate() {
                let g = gd[src + oy * ow + ox];
                dx[dst + ylo * w + xlo] += g * (1.0 - fy) * (1.0 - fx);
                dx[dst + ylo * w + xhi] += g * (1.0 - fy) * fx;
                dx[dst + yhi * w + xlo] += g * fy * (1.0 - fx);
                dx[dst + yhi * w + xhi] += g * fy * fx;
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}
