//! Raw numeric kernels used by the differentiable ops.
//!
//! All kernels accumulate into `out` (callers zero the buffer when needed),
//! and all reductions run in a fixed sequential order so results are
//! deterministic on a given platform.

use super::Real;

/// Four output rows, four k-steps. Each element's contributions chain
/// left-associated in ascending k, so any row/k blocking that feeds this
/// kernel produces bit-identical sums to the naive triple loop. With
/// `ACC = false` the tile overwrites instead of accumulating, which lets
/// callers skip zero-filling the output buffer.
#[inline(always)]
fn tile4x4<F: Real, const ACC: bool>(
    c: [[F; 4]; 4],
    b0: &[F],
    b1: &[F],
    b2: &[F],
    b3: &[F],
    r0: &mut [F],
    r1: &mut [F],
    r2: &mut [F],
    r3: &mut [F],
) {
    let n = r0.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    let (r1, r2, r3) = (&mut r1[..n], &mut r2[..n], &mut r3[..n]);
    if ACC {
        for j in 0..n {
            r0[j] = r0[j] + c[0][0] * b0[j] + c[0][1] * b1[j] + c[0][2] * b2[j] + c[0][3] * b3[j];
            r1[j] = r1[j] + c[1][0] * b0[j] + c[1][1] * b1[j] + c[1][2] * b2[j] + c[1][3] * b3[j];
            r2[j] = r2[j] + c[2][0] * b0[j] + c[2][1] * b1[j] + c[2][2] * b2[j] + c[2][3] * b3[j];
            r3[j] = r3[j] + c[3][0] * b0[j] + c[3][1] * b1[j] + c[3][2] * b2[j] + c[3][3] * b3[j];
        }
    } else {
        for j in 0..n {
            r0[j] = c[0][0] * b0[j] + c[0][1] * b1[j] + c[0][2] * b2[j] + c[0][3] * b3[j];
            r1[j] = c[1][0] * b0[j] + c[1][1] * b1[j] + c[1][2] * b2[j] + c[1][3] * b3[j];
            r2[j] = c[2][0] * b0[j] + c[2][1] * b1[j] + c[2][2] * b2[j] + c[2][3] * b3[j];
            r3[j] = c[3][0] * b0[j] + c[3][1] * b1[j] + c[3][2] * b2[j] + c[3][3] * b3[j];
        }
    }
}

/// Four output rows, one k-step.
#[inline(always)]
fn tile4x1<F: Real, const ACC: bool>(
    c: [F; 4],
    b0: &[F],
    r0: &mut [F],
    r1: &mut [F],
    r2: &mut [F],
    r3: &mut [F],
) {
    let n = r0.len();
    let b0 = &b0[..n];
    let (r1, r2, r3) = (&mut r1[..n], &mut r2[..n], &mut r3[..n]);
    if ACC {
        for j in 0..n {
            r0[j] = r0[j] + c[0] * b0[j];
            r1[j] = r1[j] + c[1] * b0[j];
            r2[j] = r2[j] + c[2] * b0[j];
            r3[j] = r3[j] + c[3] * b0[j];
        }
    } else {
        for j in 0..n {
            r0[j] = c[0] * b0[j];
            r1[j] = c[1] * b0[j];
            r2[j] = c[2] * b0[j];
            r3[j] = c[3] * b0[j];
        }
    }
}

/// One output row, four k-steps.
#[inline(always)]
fn tile1x4<F: Real, const ACC: bool>(c: [F; 4], b0: &[F], b1: &[F], b2: &[F], b3: &[F], r0: &mut [F]) {
    let n = r0.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    if ACC {
        for j in 0..n {
            r0[j] = r0[j] + c[0] * b0[j] + c[1] * b1[j] + c[2] * b2[j] + c[3] * b3[j];
        }
    } else {
        for j in 0..n {
            r0[j] = c[0] * b0[j] + c[1] * b1[j] + c[2] * b2[j] + c[3] * b3[j];
        }
    }
}

#[inline(always)]
fn tile1x1<F: Real, const ACC: bool>(c: F, b0: &[F], r0: &mut [F]) {
    for (o, &bv) in r0.iter_mut().zip(b0) {
        *o = if ACC { *o + c * bv } else { c * bv };
    }
}

#[inline(always)]
fn split4<F>(rows: &mut [F], n: usize) -> (&mut [F], &mut [F], &mut [F], &mut [F]) {
    let (r0, rest) = rows.split_at_mut(n);
    let (r1, rest) = rest.split_at_mut(n);
    let (r2, r3) = rest.split_at_mut(n);
    (r0, r1, r2, r3)
}

/// Column-chunk width. One k×NB panel of b stays cache-resident while every
/// row block consumes it, so b is streamed from memory once per matmul.
const NB: usize = 512;

fn mm_impl<F: Real, const ACC: bool>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mb = m - m % 4;
    let kb = k - k % 4;
    for nb in (0..n).step_by(NB) {
        let ne = (nb + NB).min(n);
        for i in (0..mb).step_by(4) {
            let (r0, r1, r2, r3) = split4(&mut out[i * n..(i + 4) * n], n);
            let (r0, r1, r2, r3) =
                (&mut r0[nb..ne], &mut r1[nb..ne], &mut r2[nb..ne], &mut r3[nb..ne]);
            let (a0, a1, a2, a3) = (
                &a[i * k..(i + 1) * k],
                &a[(i + 1) * k..(i + 2) * k],
                &a[(i + 2) * k..(i + 3) * k],
                &a[(i + 3) * k..(i + 4) * k],
            );
            for kk in (0..kb).step_by(4) {
                let c = [
                    [a0[kk], a0[kk + 1], a0[kk + 2], a0[kk + 3]],
                    [a1[kk], a1[kk + 1], a1[kk + 2], a1[kk + 3]],
                    [a2[kk], a2[kk + 1], a2[kk + 2], a2[kk + 3]],
                    [a3[kk], a3[kk + 1], a3[kk + 2], a3[kk + 3]],
                ];
                let (b0, b1, b2, b3) = (
                    &b[kk * n + nb..kk * n + ne],
                    &b[(kk + 1) * n + nb..(kk + 1) * n + ne],
                    &b[(kk + 2) * n + nb..(kk + 2) * n + ne],
                    &b[(kk + 3) * n + nb..(kk + 3) * n + ne],
                );
                if ACC || kk > 0 {
                    tile4x4::<F, true>(c, b0, b1, b2, b3, r0, r1, r2, r3);
                } else {
                    tile4x4::<F, false>(c, b0, b1, b2, b3, r0, r1, r2, r3);
                }
            }
            for kk in kb..k {
                let c = [a0[kk], a1[kk], a2[kk], a3[kk]];
                let b0 = &b[kk * n + nb..kk * n + ne];
                if ACC || kk > 0 {
                    tile4x1::<F, true>(c, b0, r0, r1, r2, r3);
                } else {
                    tile4x1::<F, false>(c, b0, r0, r1, r2, r3);
                }
            }
        }
        for i in mb..m {
            let r0 = &mut out[i * n + nb..i * n + ne];
            let a0 = &a[i * k..(i + 1) * k];
            for kk in (0..kb).step_by(4) {
                let c = [a0[kk], a0[kk + 1], a0[kk + 2], a0[kk + 3]];
                let (b0, b1, b2, b3) = (
                    &b[kk * n + nb..kk * n + ne],
                    &b[(kk + 1) * n + nb..(kk + 1) * n + ne],
                    &b[(kk + 2) * n + nb..(kk + 2) * n + ne],
                    &b[(kk + 3) * n + nb..(kk + 3) * n + ne],
                );
                if ACC || kk > 0 {
                    tile1x4::<F, true>(c, b0, b1, b2, b3, r0);
                } else {
                    tile1x4::<F, false>(c, b0, b1, b2, b3, r0);
                }
            }
            for kk in kb..k {
                let b0 = &b[kk * n + nb..kk * n + ne];
                if ACC || kk > 0 {
                    tile1x1::<F, true>(a0[kk], b0, r0);
                } else {
                    tile1x1::<F, false>(a0[kk], b0, r0);
                }
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[k,n]
pub fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    mm_impl::<F, true>(a, b, m, k, n, out)
}

/// out[m,n] = a[m,k] · b[k,n]; prior contents of `out` are ignored.
pub fn mm_ow<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    mm_impl::<F, false>(a, b, m, k, n, out)
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
///
/// Dot products advance in 4x4 groups so sixteen independent accumulator
/// chains hide the FMA latency; each dot still sums in ascending k.
pub fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mbl = m - m % 4;
    let nbl = n - n % 4;
    for i in (0..mbl).step_by(4) {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for j in (0..nbl).step_by(4) {
            let (b0, b1, b2, b3) = (
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            let mut acc = [[F::zero(); 4]; 4];
            for kk in 0..k {
                let av = [a0[kk], a1[kk], a2[kk], a3[kk]];
                let bv = [b0[kk], b1[kk], b2[kk], b3[kk]];
                for (accr, &avr) in acc.iter_mut().zip(&av) {
                    for (cell, &bvc) in accr.iter_mut().zip(&bv) {
                        *cell = *cell + avr * bvc;
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let orow = &mut out[(i + r) * n + j..(i + r) * n + j + 4];
                for (o, &v) in orow.iter_mut().zip(accr) {
                    *o = *o + v;
                }
            }
        }
        for j in nbl..n {
            let b0 = &b[j * k..(j + 1) * k];
            let mut acc = [F::zero(); 4];
            for kk in 0..k {
                acc[0] = acc[0] + a0[kk] * b0[kk];
                acc[1] = acc[1] + a1[kk] * b0[kk];
                acc[2] = acc[2] + a2[kk] * b0[kk];
                acc[3] = acc[3] + a3[kk] * b0[kk];
            }
            for (r, &v) in acc.iter().enumerate() {
                out[(i + r) * n + j] = out[(i + r) * n + j] + v;
            }
        }
    }
    for i in mbl..m {
        let a0 = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b0 = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a0.iter().zip(b0) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

fn mm_tn_impl<F: Real, const ACC: bool>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mb = m - m % 4;
    let kb = k - k % 4;
    for nb in (0..n).step_by(NB) {
        let ne = (nb + NB).min(n);
        for i in (0..mb).step_by(4) {
            let (r0, r1, r2, r3) = split4(&mut out[i * n..(i + 4) * n], n);
            let (r0, r1, r2, r3) =
                (&mut r0[nb..ne], &mut r1[nb..ne], &mut r2[nb..ne], &mut r3[nb..ne]);
            for kk in (0..kb).step_by(4) {
                let mut c = [[F::zero(); 4]; 4];
                for (row, crow) in c.iter_mut().enumerate() {
                    for (kc, cv) in crow.iter_mut().enumerate() {
                        *cv = a[(kk + kc) * m + i + row];
                    }
                }
                let (b0, b1, b2, b3) = (
                    &b[kk * n + nb..kk * n + ne],
                    &b[(kk + 1) * n + nb..(kk + 1) * n + ne],
                    &b[(kk + 2) * n + nb..(kk + 2) * n + ne],
                    &b[(kk + 3) * n + nb..(kk + 3) * n + ne],
                );
                if ACC || kk > 0 {
                    tile4x4::<F, true>(c, b0, b1, b2, b3, r0, r1, r2, r3);
                } else {
                    tile4x4::<F, false>(c, b0, b1, b2, b3, r0, r1, r2, r3);
                }
            }
            for kk in kb..k {
                let c = [a[kk * m + i], a[kk * m + i + 1], a[kk * m + i + 2], a[kk * m + i + 3]];
                let b0 = &b[kk * n + nb..kk * n + ne];
                if ACC || kk > 0 {
                    tile4x1::<F, true>(c, b0, r0, r1, r2, r3);
                } else {
                    tile4x1::<F, false>(c, b0, r0, r1, r2, r3);
                }
            }
        }
        for i in mb..m {
            let r0 = &mut out[i * n + nb..i * n + ne];
            for kk in (0..kb).step_by(4) {
                let c =
                    [a[kk * m + i], a[(kk + 1) * m + i], a[(kk + 2) * m + i], a[(kk + 3) * m + i]];
                let (b0, b1, b2, b3) = (
                    &b[kk * n + nb..kk * n + ne],
                    &b[(kk + 1) * n + nb..(kk + 1) * n + ne],
                    &b[(kk + 2) * n + nb..(kk + 2) * n + ne],
                    &b[(kk + 3) * n + nb..(kk + 3) * n + ne],
                );
                if ACC || kk > 0 {
                    tile1x4::<F, true>(c, b0, b1, b2, b3, r0);
                } else {
                    tile1x4::<F, false>(c, b0, b1, b2, b3, r0);
                }
            }
            for kk in kb..k {
                let b0 = &b[kk * n + nb..kk * n + ne];
                if ACC || kk > 0 {
                    tile1x1::<F, true>(a[kk * m + i], b0, r0);
                } else {
                    tile1x1::<F, false>(a[kk * m + i], b0, r0);
                }
            }
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub fn mm_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    mm_tn_impl::<F, true>(a, b, m, k, n, out)
}

/// out[m,n] = a[k,m]ᵀ · b[k,n]; prior contents of `out` are ignored.
pub fn mm_tn_ow<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    mm_tn_impl::<F, false>(a, b, m, k, n, out)
}

/// Gathers conv patches of one image: cols[oh·ow, ci·kh·kw], zero padding.
/// Naive per-element walk; retained as the reference oracle for the blocked
/// gather/scatter pair below.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(cols.len(), oh * ow * ci * kh * kw);
    let kcols = ci * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * kcols..(oy * ow + ox + 1) * kcols];
            let mut idx = 0;
            for c in 0..ci {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for dy in 0..kh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    for dx in 0..kw {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            F::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// First output index whose input coordinate `o·stride + d − p` lands inside
/// `[0, extent)`, and one past the last, both clamped to `limit` outputs.
#[inline]
fn tap_range(d: usize, p: usize, stride: usize, extent: usize, limit: usize) -> (usize, usize) {
    let lo = if d >= p { 0 } else { (p - d).div_ceil(stride) };
    let hi = (extent + p).saturating_sub(d).div_ceil(stride).min(limit);
    (lo.min(hi), hi)
}

/// Like [`im2col`] but transposed: cols_t[ci·kh·kw, oh·ow]. The conv forward
/// pass prefers this layout because W[co,K] · cols_t[K,osz] runs on the fast
/// accumulation kernel. Per kernel tap the valid output range is hoisted out
/// of the copy loop, so interior rows move as contiguous slices.
#[allow(clippy::too_many_arguments)]
pub fn im2col_t<F: Real>(
    x: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    cols_t: &mut [F],
) {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(cols_t.len(), oh * ow * ci * kh * kw);
    let osz = oh * ow;
    let mut krow = 0;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            let (oy_lo, oy_hi) = tap_range(dy, ph, sh, h, oh);
            for dx in 0..kw {
                let (ox_lo, ox_hi) = tap_range(dx, pw, sw, w, ow);
                let dst = &mut cols_t[krow * osz..(krow + 1) * osz];
                dst[..oy_lo * ow].fill(F::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + dy - ph;
                    let src_row = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    drow[..ox_lo].fill(F::zero());
                    if sw == 1 {
                        let off = ox_lo + dx - pw;
                        drow[ox_lo..ox_hi].copy_from_slice(&src_row[off..off + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = src_row[ox * sw + dx - pw];
                        }
                    }
                    drow[ox_hi..].fill(F::zero());
                }
                dst[oy_hi * ow..].fill(F::zero());
                krow += 1;
            }
        }
    }
}

/// Scatter-adds gradients in the transposed column layout back onto one
/// image; inverse of [`im2col_t`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_t<F: Real>(
    cols_t: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    x: &mut [F],
) {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(cols_t.len(), oh * ow * ci * kh * kw);
    let osz = oh * ow;
    let mut krow = 0;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            let (oy_lo, oy_hi) = tap_range(dy, ph, sh, h, oh);
            for dx in 0..kw {
                let (ox_lo, ox_hi) = tap_range(dx, pw, sw, w, ow);
                let src = &cols_t[krow * osz..(krow + 1) * osz];
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + dy - ph;
                    let xrow = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if sw == 1 {
                        let off = ox_lo + dx - pw;
                        let dstc = &mut xrow[off..off + ox_hi - ox_lo];
                        for (d, &s) in dstc.iter_mut().zip(&srow[ox_lo..ox_hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * sw + dx - pw;
                            xrow[ix] = xrow[ix] + srow[ox];
                        }
                    }
                }
                krow += 1;
            }
        }
    }
}
