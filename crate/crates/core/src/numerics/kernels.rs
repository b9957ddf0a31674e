//! Scalar loop kernels behind the tape operations.
//!
//! All buffers are row-major. Convolutions are cross-correlations (no kernel
//! flip) over zero-padded input. The three conv kernels form a family that is
//! closed under differentiation: the gradient of each one with respect to
//! either operand is again one of the three, which is what lets a recorded
//! backward pass be differentiated a second time.

/// Output extent of a strided, padded correlation along one axis.
pub(super) fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output index range `[lo, hi)` for which `o * stride + off - pad` lands in
/// `[0, n)`.
fn valid_range(n: usize, n_out: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = off as isize - pad as isize; // input index = out * s + shift
    let lo = (-shift + s - 1).div_euclid(s).clamp(0, n_out as isize) as usize;
    let hi = ((n as isize - 1 - shift).div_euclid(s) + 1).clamp(0, n_out as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[o,i,j] += sum_{c,u,v} x[c, i*s+u-p, j*s+v-p] * wt[o,c,u,v]`
#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f32],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f32],
    ho: usize,
    wo: usize,
) {
    for o in 0..co {
        let out_o = &mut out[o * ho * wo..][..ho * wo];
        for c in 0..ci {
            let x_c = &x[c * h * w..][..h * w];
            let w_oc = &wt[(o * ci + c) * k * k..][..k * k];
            for u in 0..k {
                let (ilo, ihi) = valid_range(h, ho, stride, pad, u);
                for v in 0..k {
                    let wv = w_oc[u * k + v];
                    let (jlo, jhi) = valid_range(w, wo, stride, pad, v);
                    if jlo >= jhi {
                        continue;
                    }
                    for i in ilo..ihi {
                        let r = i * stride + u - pad;
                        let xrow = &x_c[r * w..][..w];
                        let yrow = &mut out_o[i * wo..][..wo];
                        if stride == 1 {
                            let q0 = jlo + v - pad;
                            let xs = &xrow[q0..q0 + (jhi - jlo)];
                            for (y, xv) in yrow[jlo..jhi].iter_mut().zip(xs) {
                                *y += wv * xv;
                            }
                        } else {
                            for j in jlo..jhi {
                                yrow[j] += wv * xrow[j * stride + v - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`] with respect to its input:
/// `dx[c,r,q] += sum g[o,i,j] * wt[o,c,u,v]` over `r = i*s+u-p, q = j*s+v-p`.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_input_grad(
    g: &[f32],
    co: usize,
    ho: usize,
    wo: usize,
    wt: &[f32],
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f32],
    h: usize,
    w: usize,
) {
    for o in 0..co {
        let g_o = &g[o * ho * wo..][..ho * wo];
        for c in 0..ci {
            let dx_c = &mut dx[c * h * w..][..h * w];
            let w_oc = &wt[(o * ci + c) * k * k..][..k * k];
            for u in 0..k {
                let (ilo, ihi) = valid_range(h, ho, stride, pad, u);
                for v in 0..k {
                    let wv = w_oc[u * k + v];
                    let (jlo, jhi) = valid_range(w, wo, stride, pad, v);
                    if jlo >= jhi {
                        continue;
                    }
                    for i in ilo..ihi {
                        let r = i * stride + u - pad;
                        let grow = &g_o[i * wo..][..wo];
                        let dxrow = &mut dx_c[r * w..][..w];
                        if stride == 1 {
                            let q0 = jlo + v - pad;
                            for (d, gv) in dxrow[q0..q0 + (jhi - jlo)].iter_mut().zip(&grow[jlo..jhi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for j in jlo..jhi {
                                dxrow[j * stride + v - pad] += wv * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`] with respect to its weight:
/// `dw[o,c,u,v] = sum_{i,j} x[c, i*s+u-p, j*s+v-p] * g[o,i,j]`.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_weight_grad(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    g: &[f32],
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    k: usize,
    dw: &mut [f32],
) {
    for o in 0..co {
        let g_o = &g[o * ho * wo..][..ho * wo];
        for c in 0..ci {
            let x_c = &x[c * h * w..][..h * w];
            for u in 0..k {
                let (ilo, ihi) = valid_range(h, ho, stride, pad, u);
                for v in 0..k {
                    let (jlo, jhi) = valid_range(w, wo, stride, pad, v);
                    let mut acc = 0.0f32;
                    if jlo < jhi {
                        for i in ilo..ihi {
                            let r = i * stride + u - pad;
                            let xrow = &x_c[r * w..][..w];
                            let grow = &g_o[i * wo..][..wo];
                            if stride == 1 {
                                let q0 = jlo + v - pad;
                                acc += xrow[q0..q0 + (jhi - jlo)]
                                    .iter()
                                    .zip(&grow[jlo..jhi])
                                    .map(|(a, b)| a * b)
                                    .sum::<f32>();
                            } else {
                                for j in jlo..jhi {
                                    acc += xrow[j * stride + v - pad] * grow[j];
                                }
                            }
                        }
                    }
                    dw[((o * ci + c) * k + u) * k + v] = acc;
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub(super) fn upsample_nearest(x: &[f32], c: usize, h: usize, w: usize, f: usize, out: &mut [f32]) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        let x_c = &x[ch * h * w..][..h * w];
        let out_c = &mut out[ch * ho * wo..][..ho * wo];
        for i in 0..ho {
            let src = &x_c[(i / f) * w..][..w];
            let dst = &mut out_c[i * wo..][..wo];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / f];
            }
        }
    }
}

/// Adjoint of [`upsample_nearest`]: sums each `f x f` block.
pub(super) fn block_sum(x: &[f32], c: usize, h: usize, w: usize, f: usize, out: &mut [f32]) {
    let (ho, wo) = (h / f, w / f);
    for ch in 0..c {
        let x_c = &x[ch * h * w..][..h * w];
        let out_c = &mut out[ch * ho * wo..][..ho * wo];
        for i in 0..h {
            let src = &x_c[i * w..][..w];
            let dst = &mut out_c[(i / f) * wo..][..wo];
            for (j, s) in src.iter().enumerate() {
                dst[j / f] += s;
            }
        }
    }
}

/// `out[r] = sum_c m[r,c] * x[c]`
pub(super) fn matvec(m: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    for r in 0..rows {
        let row = &m[r * cols..][..cols];
        let acc: f64 = row.iter().zip(x).map(|(a, b)| *a as f64 * *b as f64).sum();
        out[r] = acc as f32;
    }
}

/// `out[c] = sum_r m[r,c] * y[r]`
pub(super) fn matvec_t(m: &[f32], rows: usize, cols: usize, y: &[f32], out: &mut [f32]) {
    let mut acc = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &m[r * cols..][..cols];
        let yr = y[r] as f64;
        for (a, mv) in acc.iter_mut().zip(row) {
            *a += *mv as f64 * yr;
        }
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = *a as f32;
    }
}

/// `out[r,c] = u[r] * v[c]`
pub(super) fn outer(u: &[f32], v: &[f32], out: &mut [f32]) {
    for (r, uv) in u.iter().enumerate() {
        for (c, vv) in v.iter().enumerate() {
            out[r * v.len() + c] = uv * vv;
        }
    }
}
