//! Slice-level forward and backward kernels for the spatial primitives.
//!
//! All activations are (B, C, T, N) row-major with joints contiguous.

use crate::real::Real;
use crate::shape::valid_range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
            groups,
        }
    }
}

/// Dimensions resolved for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub t: usize,
    pub n: usize,
    pub kh: usize,
    pub kw: usize,
    pub to: usize,
    pub no: usize,
}

/// Visits every valid (output row, input row, output col range, input col
/// start) for one kernel tap.
#[inline]
fn for_each_tap_row(
    d: &ConvDims,
    g: &ConvGeom,
    ki: usize,
    kj: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (dh, dw) = g.dilation;
    let (t_lo, t_hi) = valid_range(d.to, d.t, sh, ph, ki * dh);
    let (n_lo, n_hi) = valid_range(d.no, d.n, sw, pw, kj * dw);
    if n_lo >= n_hi {
        return;
    }
    for to in t_lo..t_hi {
        let ti = to * sh + ki * dh - ph;
        let ni0 = n_lo * sw + kj * dw - pw;
        f(to, ti, n_lo, n_hi, ni0);
    }
}

/// Unfolds group `grp` of `x` into a (cin_g * kh * kw, B * To * No) matrix;
/// padded taps stay zero.
fn im2col<S: Real>(x: &[S], d: &ConvDims, g: &ConvGeom, grp: usize, col: &mut [S]) {
    let cin_g = d.cin / g.groups;
    let in_plane = d.t * d.n;
    let out_plane = d.to * d.no;
    let bp = d.batch * out_plane;
    let sw = g.stride.1;
    col.fill(S::zero());
    for icl in 0..cin_g {
        let ic = grp * cin_g + icl;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (icl * d.kh + ki) * d.kw + kj;
                let crow = &mut col[r * bp..(r + 1) * bp];
                for b in 0..d.batch {
                    let in_p = &x[(b * d.cin + ic) * in_plane..(b * d.cin + ic + 1) * in_plane];
                    let c_p = &mut crow[b * out_plane..(b + 1) * out_plane];
                    for_each_tap_row(d, g, ki, kj, |to, ti, lo, hi, ni0| {
                        let dst = &mut c_p[to * d.no + lo..to * d.no + hi];
                        let irow = &in_p[ti * d.n..(ti + 1) * d.n];
                        if sw == 1 {
                            dst.copy_from_slice(&irow[ni0..ni0 + (hi - lo)]);
                        } else {
                            for (k, o) in dst.iter_mut().enumerate() {
                                *o = irow[ni0 + k * sw];
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `gin`.
fn col2im<S: Real>(col: &[S], d: &ConvDims, g: &ConvGeom, grp: usize, gin: &mut [S]) {
    let cin_g = d.cin / g.groups;
    let in_plane = d.t * d.n;
    let out_plane = d.to * d.no;
    let bp = d.batch * out_plane;
    let sw = g.stride.1;
    for icl in 0..cin_g {
        let ic = grp * cin_g + icl;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (icl * d.kh + ki) * d.kw + kj;
                let crow = &col[r * bp..(r + 1) * bp];
                for b in 0..d.batch {
                    let g_p = &mut gin[(b * d.cin + ic) * in_plane..(b * d.cin + ic + 1) * in_plane];
                    let c_p = &crow[b * out_plane..(b + 1) * out_plane];
                    for_each_tap_row(d, g, ki, kj, |to, ti, lo, hi, ni0| {
                        let src = &c_p[to * d.no + lo..to * d.no + hi];
                        let grow = &mut g_p[ti * d.n..(ti + 1) * d.n];
                        if sw == 1 {
                            for (o, &v) in grow[ni0..ni0 + (hi - lo)].iter_mut().zip(src) {
                                *o += v;
                            }
                        } else {
                            for (k, &v) in src.iter().enumerate() {
                                grow[ni0 + k * sw] += v;
                            }
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn axpy<S: Real>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv2d_forward<S: Real>(x: &[S], w: &[S], d: &ConvDims, g: &ConvGeom) -> Vec<S> {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let taps = cin_g * d.kh * d.kw;
    let out_plane = d.to * d.no;
    let bp = d.batch * out_plane;
    let mut out = vec![S::zero(); d.batch * d.cout * out_plane];
    let mut col = vec![S::zero(); taps * bp];
    let mut acc = vec![S::zero(); cout_g * bp];
    for grp in 0..g.groups {
        im2col(x, d, g, grp, &mut col);
        acc.fill(S::zero());
        let wg = &w[grp * cout_g * taps..(grp + 1) * cout_g * taps];
        let mut blocks = acc.chunks_exact_mut(4 * bp);
        let mut oc = 0;
        for block in &mut blocks {
            let (r0, rest) = block.split_at_mut(bp);
            let (r1, rest) = rest.split_at_mut(bp);
            let (r2, r3) = rest.split_at_mut(bp);
            for r in 0..taps {
                let c = &col[r * bp..(r + 1) * bp];
                let (w0, w1, w2, w3) = (
                    wg[oc * taps + r],
                    wg[(oc + 1) * taps + r],
                    wg[(oc + 2) * taps + r],
                    wg[(oc + 3) * taps + r],
                );
                for ((((&cv, a0), a1), a2), a3) in c.iter().zip(r0.iter_mut()).zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()) {
                    *a0 += w0 * cv;
                    *a1 += w1 * cv;
                    *a2 += w2 * cv;
                    *a3 += w3 * cv;
                }
            }
            oc += 4;
        }
        for arow in blocks.into_remainder().chunks_exact_mut(bp) {
            for r in 0..taps {
                axpy(arow, wg[oc * taps + r], &col[r * bp..(r + 1) * bp]);
            }
            oc += 1;
        }
        for oc in 0..cout_g {
            for b in 0..d.batch {
                let dst = (b * d.cout + grp * cout_g + oc) * out_plane;
                out[dst..dst + out_plane].copy_from_slice(&acc[oc * bp + b * out_plane..oc * bp + (b + 1) * out_plane]);
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt weight); either may be skipped.
pub(crate) fn conv2d_backward<S: Real>(
    x: &[S],
    w: &[S],
    gout: &[S],
    d: &ConvDims,
    g: &ConvGeom,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let taps = cin_g * d.kh * d.kw;
    let out_plane = d.to * d.no;
    let bp = d.batch * out_plane;
    let mut gin = want_input.then(|| vec![S::zero(); x.len()]);
    let mut gw = want_weight.then(|| vec![S::zero(); w.len()]);
    let mut col = vec![S::zero(); taps * bp];
    let mut gmat = vec![S::zero(); cout_g * bp];
    for grp in 0..g.groups {
        for oc in 0..cout_g {
            for b in 0..d.batch {
                let src = (b * d.cout + grp * cout_g + oc) * out_plane;
                gmat[oc * bp + b * out_plane..oc * bp + (b + 1) * out_plane].copy_from_slice(&gout[src..src + out_plane]);
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(x, d, g, grp, &mut col);
            for oc in 0..cout_g {
                let grow = &gmat[oc * bp..(oc + 1) * bp];
                let base = (grp * cout_g + oc) * taps;
                for r in 0..taps {
                    gw[base + r] += dot(grow, &col[r * bp..(r + 1) * bp]);
                }
            }
        }
        if let Some(gin) = gin.as_mut() {
            col.fill(S::zero());
            let wg = &w[grp * cout_g * taps..(grp + 1) * cout_g * taps];
            for r in 0..taps {
                let crow = &mut col[r * bp..(r + 1) * bp];
                let mut rows = gmat.chunks_exact(4 * bp);
                let mut oc = 0;
                for block in &mut rows {
                    let (g0, rest) = block.split_at(bp);
                    let (g1, rest) = rest.split_at(bp);
                    let (g2, g3) = rest.split_at(bp);
                    let (w0, w1, w2, w3) = (
                        wg[oc * taps + r],
                        wg[(oc + 1) * taps + r],
                        wg[(oc + 2) * taps + r],
                        wg[(oc + 3) * taps + r],
                    );
                    for ((((c, &a), &b), &e), &f) in crow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                        *c += w0 * a + w1 * b + w2 * e + w3 * f;
                    }
                    oc += 4;
                }
                for grow in rows.remainder().chunks_exact(bp) {
                    axpy(crow, wg[oc * taps + r], grow);
                    oc += 1;
                }
            }
            col2im(&col, d, g, grp, gin);
        }
    }
    (gin, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub t: usize,
    pub n: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub to: usize,
    pub no: usize,
}

/// Max pooling; also returns, per output cell, the flat input index that
/// won (first in row-major scan order on ties).
pub(crate) fn max_pool_forward<S: Real>(x: &[S], d: &PoolDims) -> (Vec<S>, Vec<u32>) {
    let mut out = Vec::with_capacity(d.planes * d.to * d.no);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..d.planes {
        let base = p * d.t * d.n;
        for to in 0..d.to {
            for no in 0..d.no {
                let mut best = S::neg_infinity();
                let mut best_idx = u32::MAX;
                for ki in 0..d.k {
                    let ti = (to * d.stride + ki) as isize - d.pad as isize;
                    if ti < 0 || ti as usize >= d.t {
                        continue;
                    }
                    for kj in 0..d.k {
                        let ni = (no * d.stride + kj) as isize - d.pad as isize;
                        if ni < 0 || ni as usize >= d.n {
                            continue;
                        }
                        let idx = base + ti as usize * d.n + ni as usize;
                        let v = x[idx];
                        if best_idx == u32::MAX || v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Average pooling with padded cells excluded from the divisor.
pub(crate) fn avg_pool_forward<S: Real>(x: &[S], d: &PoolDims) -> Vec<S> {
    let mut out = Vec::with_capacity(d.planes * d.to * d.no);
    for p in 0..d.planes {
        let base = p * d.t * d.n;
        for to in 0..d.to {
            let (t0, t1) = window_bounds(to, d.stride, d.pad, d.k, d.t);
            for no in 0..d.no {
                let (n0, n1) = window_bounds(no, d.stride, d.pad, d.k, d.n);
                let mut acc = S::zero();
                for ti in t0..t1 {
                    for v in &x[base + ti * d.n + n0..base + ti * d.n + n1] {
                        acc += *v;
                    }
                }
                out.push(acc / S::of(((t1 - t0) * (n1 - n0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<S: Real>(gout: &[S], d: &PoolDims) -> Vec<S> {
    let mut gin = vec![S::zero(); d.planes * d.t * d.n];
    for p in 0..d.planes {
        let base = p * d.t * d.n;
        for to in 0..d.to {
            let (t0, t1) = window_bounds(to, d.stride, d.pad, d.k, d.t);
            for no in 0..d.no {
                let (n0, n1) = window_bounds(no, d.stride, d.pad, d.k, d.n);
                let share = gout[(p * d.to + to) * d.no + no] / S::of(((t1 - t0) * (n1 - n0)) as f64);
                for ti in t0..t1 {
                    for g in &mut gin[base + ti * d.n + n0..base + ti * d.n + n1] {
                        *g += share;
                    }
                }
            }
        }
    }
    gin
}

#[inline]
fn window_bounds(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(len);
    (lo, hi.max(lo))
}

/// Per-channel statistics saved by a train-mode batch norm forward.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<S> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn batchnorm_train_forward<S: Real>(
    x: &[S],
    dims: [usize; 4],
    scale: &[S],
    shift: &[S],
    eps: S,
) -> (Vec<S>, BnSaved<S>, Vec<S>) {
    let [b, c, t, n] = dims;
    let plane = t * n;
    let count = S::of((b * plane) as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut acc = S::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            acc += x[base..base + plane].iter().copied().sum::<S>();
        }
        let m = acc / count;
        let mut sq = S::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for &v in &x[base..base + plane] {
                let dv = v - m;
                sq += dv * dv;
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let (m, is, g, s) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *o = g * (v - m) * is + s;
            }
        }
    }
    (out, BnSaved { mean, inv_std }, var)
}

/// Returns (grad input, grad scale, grad shift) for train-mode batch norm.
pub(crate) fn batchnorm_train_backward<S: Real>(
    x: &[S],
    dims: [usize; 4],
    scale: &[S],
    saved: &BnSaved<S>,
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let [b, c, t, n] = dims;
    let plane = t * n;
    let count = S::of((b * plane) as f64);
    let mut gin = vec![S::zero(); x.len()];
    let mut gscale = vec![S::zero(); c];
    let mut gshift = vec![S::zero(); c];
    for ch in 0..c {
        let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for (&go, &v) in gout[base..base + plane].iter().zip(&x[base..base + plane]) {
                sum_g += go;
                sum_gx += go * (v - m) * is;
            }
        }
        gshift[ch] = sum_g;
        gscale[ch] = sum_gx;
        let k = scale[ch] * is / count;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for ((gi, &go), &v) in gin[base..base + plane]
                .iter_mut()
                .zip(&gout[base..base + plane])
                .zip(&x[base..base + plane])
            {
                let xhat = (v - m) * is;
                *gi = k * (count * go - sum_g - xhat * sum_gx);
            }
        }
    }
    (gin, gscale, gshift)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(b: usize, cin: usize, cout: usize, t: usize, n: usize, k: usize, g: &ConvGeom) -> ConvDims {
        let to = crate::shape::window_out_len(t, k, g.stride.0, g.padding.0, g.dilation.0).unwrap();
        let no = crate::shape::window_out_len(n, k, g.stride.1, g.padding.1, g.dilation.1).unwrap();
        ConvDims {
            batch: b,
            cin,
            cout,
            t,
            n,
            kh: k,
            kw: k,
            to,
            no,
        }
    }

    /// Direct six-loop convolution with explicit bounds checks.
    fn naive_conv(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom) -> Vec<f64> {
        let cin_g = d.cin / g.groups;
        let cout_g = d.cout / g.groups;
        let mut out = vec![0.0; d.batch * d.cout * d.to * d.no];
        for b in 0..d.batch {
            for oc in 0..d.cout {
                for to in 0..d.to {
                    for no in 0..d.no {
                        let mut acc = 0.0;
                        for icl in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icl;
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let ti = (to * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                    let ni = (no * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                    if ti < 0 || ni < 0 || ti as usize >= d.t || ni as usize >= d.n {
                                        continue;
                                    }
                                    acc += w[((oc * cin_g + icl) * d.kh + ki) * d.kw + kj]
                                        * x[((b * d.cin + ic) * d.t + ti as usize) * d.n + ni as usize];
                                }
                            }
                        }
                        out[((b * d.cout + oc) * d.to + to) * d.no + no] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_over_geometries() {
        let mut seed = 1u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(stride, pad, dil, groups, k) in &[
            (1, 1, 1, 1, 3),
            (2, 1, 1, 1, 3),
            (1, 2, 2, 2, 3),
            (2, 2, 2, 4, 3),
            (2, 0, 1, 1, 1),
            (1, 0, 1, 2, 1),
        ] {
            let g = ConvGeom::new(stride, pad, dil, groups);
            let d = dims(2, 4, 4, 7, 5, k, &g);
            let x: Vec<f64> = (0..2 * 4 * 7 * 5).map(|_| next()).collect();
            let w: Vec<f64> = (0..4 * (4 / groups) * k * k).map(|_| next()).collect();
            let fast = conv2d_forward(&x, &w, &d, &g);
            let slow = naive_conv(&x, &w, &d, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_ramp() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let d = PoolDims {
            planes: 1,
            t: 4,
            n: 4,
            k: 3,
            stride: 2,
            pad: 1,
            to: 2,
            no: 2,
        };
        let (out, arg) = max_pool_forward(&x, &d);
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn max_pool_ties_go_to_first_index() {
        let x = vec![1.0f64; 9];
        let d = PoolDims {
            planes: 1,
            t: 3,
            n: 3,
            k: 3,
            stride: 1,
            pad: 1,
            to: 3,
            no: 3,
        };
        let (_, arg) = max_pool_forward(&x, &d);
        // window at (1,1) covers the full input; row-major first is index 0
        assert_eq!(arg[4], 0);
        assert_eq!(arg[8], 4);
    }
}
