//! Convolution, pooling, and normalization kernels.
//!
//! Both the autodiff tape and the streaming detector state call into these
//! functions, so batch and incremental inference execute the same arithmetic
//! in the same order.

use crate::tensor::Real;

/// Padding along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    /// Left-only zero padding of `kernel - 1`: output at index t sees inputs ≤ t.
    Causal,
    /// Symmetric zero padding of `(kernel - 1) / 2` on each side (odd kernels).
    Same,
}

impl PadKind {
    /// Offset added to the output index to get the source index of kernel tap 0.
    #[inline]
    pub fn tap0_offset(self, kernel: usize) -> isize {
        match self {
            PadKind::Causal => -((kernel - 1) as isize),
            PadKind::Same => -(((kernel - 1) / 2) as isize),
        }
    }
}

/// Padding of a 2D (time × frequency) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad2d {
    pub time: PadKind,
    pub freq: PadKind,
}

/// 2D convolution, stride 1.
///
/// `x`: `[cin, t, f]`, `w`: `[cout, cin/groups, kt, kf]`, `bias`: `[cout]`,
/// `out`: `[cout, t, f]` (overwritten).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    (cin, tlen, flen): (usize, usize, usize),
    w: &[T],
    (cout, kt, kf): (usize, usize, usize),
    bias: &[T],
    groups: usize,
    pad: Pad2d,
    out: &mut [T],
) {
    let cpg = cin / groups;
    let opg = cout / groups;
    debug_assert_eq!(x.len(), cin * tlen * flen);
    debug_assert_eq!(w.len(), cout * cpg * kt * kf);
    debug_assert_eq!(out.len(), cout * tlen * flen);
    let t_off = pad.time.tap0_offset(kt);
    let f_off = pad.freq.tap0_offset(kf);
    for oc in 0..cout {
        let out_plane = &mut out[oc * tlen * flen..(oc + 1) * tlen * flen];
        out_plane.fill(bias[oc]);
        let ic_base = (oc / opg) * cpg;
        for ic_local in 0..cpg {
            let x_plane = &x[(ic_base + ic_local) * tlen * flen..];
            for jt in 0..kt {
                let dt = t_off + jt as isize;
                let t_lo = (-dt).max(0) as usize;
                let t_hi = (tlen as isize).min(tlen as isize - dt).max(0) as usize;
                for jf in 0..kf {
                    let wv = w[((oc * cpg + ic_local) * kt + jt) * kf + jf];
                    if wv == T::zero() {
                        continue;
                    }
                    let df = f_off + jf as isize;
                    let f_lo = (-df).max(0) as usize;
                    let f_hi = (flen as isize).min(flen as isize - df).max(0) as usize;
                    if f_lo >= f_hi {
                        continue;
                    }
                    for t in t_lo..t_hi {
                        let src_row = ((t as isize + dt) as usize) * flen;
                        let dst_row = t * flen;
                        let src =
                            &x_plane[src_row + ((f_lo as isize + df) as usize)..][..f_hi - f_lo];
                        let dst = &mut out_plane[dst_row + f_lo..dst_row + f_hi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. Accumulates into `dx`, `dw`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    (cin, tlen, flen): (usize, usize, usize),
    w: &[T],
    (cout, kt, kf): (usize, usize, usize),
    groups: usize,
    pad: Pad2d,
    dout: &[T],
    dx: &mut [T],
    dw: &mut [T],
    dbias: &mut [T],
) {
    let cpg = cin / groups;
    let opg = cout / groups;
    let t_off = pad.time.tap0_offset(kt);
    let f_off = pad.freq.tap0_offset(kf);
    for oc in 0..cout {
        let dout_plane = &dout[oc * tlen * flen..(oc + 1) * tlen * flen];
        for &g in dout_plane {
            dbias[oc] += g;
        }
        let ic_base = (oc / opg) * cpg;
        for ic_local in 0..cpg {
            let plane = (ic_base + ic_local) * tlen * flen;
            for jt in 0..kt {
                let dt = t_off + jt as isize;
                let t_lo = (-dt).max(0) as usize;
                let t_hi = (tlen as isize).min(tlen as isize - dt).max(0) as usize;
                for jf in 0..kf {
                    let widx = ((oc * cpg + ic_local) * kt + jt) * kf + jf;
                    let wv = w[widx];
                    let df = f_off + jf as isize;
                    let f_lo = (-df).max(0) as usize;
                    let f_hi = (flen as isize).min(flen as isize - df).max(0) as usize;
                    if f_lo >= f_hi {
                        continue;
                    }
                    let mut wgrad = T::zero();
                    for t in t_lo..t_hi {
                        let src_row = plane + ((t as isize + dt) as usize) * flen;
                        let src_col = (f_lo as isize + df) as usize;
                        let g_row = &dout_plane[t * flen + f_lo..t * flen + f_hi];
                        let x_row = &x[src_row + src_col..][..f_hi - f_lo];
                        let dx_row = &mut dx[src_row + src_col..][..f_hi - f_lo];
                        for ((&g, &xv), dxv) in g_row.iter().zip(x_row).zip(dx_row) {
                            wgrad += g * xv;
                            *dxv += g * wv;
                        }
                    }
                    dw[widx] += wgrad;
                }
            }
        }
    }
}

/// 1D convolution over time, stride 1.
///
/// `x`: `[t, cin]` time-major, `w`: `[cout, cin/groups, k]`, `bias`: `[cout]`,
/// `out`: `[t, cout]` (overwritten).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward<T: Real>(
    x: &[T],
    (tlen, cin): (usize, usize),
    w: &[T],
    (cout, k): (usize, usize),
    bias: &[T],
    groups: usize,
    pad: PadKind,
    out: &mut [T],
) {
    let cpg = cin / groups;
    let opg = cout / groups;
    debug_assert_eq!(x.len(), tlen * cin);
    debug_assert_eq!(w.len(), cout * cpg * k);
    debug_assert_eq!(out.len(), tlen * cout);
    let t_off = pad.tap0_offset(k);
    for t in 0..tlen {
        let out_row = &mut out[t * cout..(t + 1) * cout];
        for (oc, o) in out_row.iter_mut().enumerate() {
            let ic_base = (oc / opg) * cpg;
            let mut acc = bias[oc];
            for j in 0..k {
                let src = t as isize + t_off + j as isize;
                if src < 0 || src >= tlen as isize {
                    continue;
                }
                let x_row = &x[src as usize * cin + ic_base..][..cpg];
                let w_row = &w[(oc * cpg) * k + j..];
                for (ic_local, &xv) in x_row.iter().enumerate() {
                    acc += w_row[ic_local * k] * xv;
                }
            }
            *o = acc;
        }
    }
}

/// Gradients of [`conv1d_forward`]. Accumulates into `dx`, `dw`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Real>(
    x: &[T],
    (tlen, cin): (usize, usize),
    w: &[T],
    (cout, k): (usize, usize),
    groups: usize,
    pad: PadKind,
    dout: &[T],
    dx: &mut [T],
    dw: &mut [T],
    dbias: &mut [T],
) {
    let cpg = cin / groups;
    let opg = cout / groups;
    let t_off = pad.tap0_offset(k);
    for t in 0..tlen {
        let g_row = &dout[t * cout..(t + 1) * cout];
        for (oc, &g) in g_row.iter().enumerate() {
            let ic_base = (oc / opg) * cpg;
            dbias[oc] += g;
            for j in 0..k {
                let src = t as isize + t_off + j as isize;
                if src < 0 || src >= tlen as isize {
                    continue;
                }
                let row = src as usize * cin + ic_base;
                for ic_local in 0..cpg {
                    let widx = (oc * cpg + ic_local) * k + j;
                    dw[widx] += g * x[row + ic_local];
                    dx[row + ic_local] += g * w[widx];
                }
            }
        }
    }
}

/// 2×2-style max pooling with stride equal to the window; trailing partial
/// windows are dropped (floor semantics). `x`: `[c, t, f]`.
///
/// Returns the flat source index of each selected maximum (first hit wins on
/// ties) so the backward pass can route gradients.
pub fn maxpool2d_forward<T: Real>(
    x: &[T],
    (c, tlen, flen): (usize, usize, usize),
    (wt, wf): (usize, usize),
    out: &mut [T],
    argmax: &mut [usize],
) {
    let to = tlen / wt;
    let fo = flen / wf;
    debug_assert_eq!(out.len(), c * to * fo);
    for ch in 0..c {
        for ot in 0..to {
            for of in 0..fo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for dt in 0..wt {
                    for df in 0..wf {
                        let idx = (ch * tlen + ot * wt + dt) * flen + of * wf + df;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * to + ot) * fo + of;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Layer normalization of one slice, before gain/bias:
/// `(x - mean) / sqrt(var + eps)`, population variance.
///
/// Returns `(mean, inv_std)` for the backward pass.
pub fn layernorm_row<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gain.iter().zip(bias)) {
        *o = g * ((v - mean) * inv_std) + b;
    }
    (mean, inv_std)
}

/// Numerically stabilized softmax of one slice (max subtraction).
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
