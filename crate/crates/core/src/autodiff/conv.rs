//! Convolution, pooling and dense layers.
//!
//! Inner loops are written as row-wise axpy / dot kernels over contiguous
//! slices so they vectorize; accumulation is `f64`.

use super::tape::{Op, Tape, Var};
use super::{AutodiffError, Tensor};

#[inline]
fn axpy(acc: &mut [f64], w: f64, x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v as f64;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let mut s: f64 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += *x as f64 * *y as f64;
    }
    s
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

/// Geometry of a batched 2-D convolution.
struct Conv2dDims {
    n: usize,
    c: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Conv2dDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn conv2d_dims(input: &[usize], kernel: &[usize]) -> Result<Conv2dDims, AutodiffError> {
    let (n, c, h, w) = match *input {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(AutodiffError::invalid("conv2d", format!("input shape {input:?}"))),
    };
    let [co, ci, kh, kw] = *kernel else {
        return Err(AutodiffError::invalid("conv2d", format!("kernel shape {kernel:?}")));
    };
    if ci != c {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(AutodiffError::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    Ok(Conv2dDims { n, c, co, h, w, k: kh })
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, co: usize) -> Result<(), AutodiffError> {
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: vec![co],
                right: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[inline]
fn axpy64(acc: &mut [f64], w: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

#[inline]
fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut s: f64 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Copies one image row into the interior of a zero-padded `f64` row.
#[inline]
fn load_padded(row: &mut [f64], src: &[f32], pad: usize) {
    row[pad..pad + src.len()].iter_mut().zip(src).for_each(|(d, s)| *d = *s as f64);
}

/// Zero-padded `f64` copy of `c` planes: `[c][h + 2r][w + 2r]`.
fn pad_planes(x: &[f32], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0f64; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            load_padded(
                &mut out[(ci * hp + y + r) * wp..][..wp],
                &x[(ci * h + y) * w..][..w],
                r,
            );
        }
    }
    out
}

const LANES: usize = 8;

/// Register-blocked channel mix for `OB` outputs starting at `ob` and 8
/// pixels starting at `px`: `out[o] = bias[o] + sum_m wt[m][o] * rows[m]`.
#[allow(clippy::too_many_arguments)]
fn mix_block<const OB: usize>(
    rows: &[&[f32]],
    wt: &[f64],
    co: usize,
    bias: Option<&[f32]>,
    ob: usize,
    px: usize,
    p: usize,
    out: &mut [f32],
) {
    let mut acc = [[0f64; LANES]; OB];
    for (q, a) in acc.iter_mut().enumerate() {
        *a = [bias.map_or(0.0, |b| b[ob + q] as f64); LANES];
    }
    for (m, row) in rows.iter().enumerate() {
        let src = &row[px..px + LANES];
        let mut s = [0f64; LANES];
        for l in 0..LANES {
            s[l] = src[l] as f64;
        }
        let wv: &[f64; OB] = wt[m * co + ob..][..OB].try_into().expect("weight slice");
        for q in 0..OB {
            for l in 0..LANES {
                acc[q][l] += wv[q] * s[l];
            }
        }
    }
    for (q, a) in acc.iter().enumerate() {
        let dst = &mut out[(ob + q) * p + px..][..LANES];
        dst.iter_mut().zip(a).for_each(|(o, v)| *o = *v as f32);
    }
}

/// `out` (`[co][p]`) gets `bias + wt^T rows` where `wt` is `[rows][co]`.
fn channel_mix(rows: &[&[f32]], wt: &[f64], co: usize, bias: Option<&[f32]>, p: usize, out: &mut [f32]) {
    debug_assert_eq!(p % LANES, 0);
    for px in (0..p).step_by(LANES) {
        let mut ob = 0;
        while ob + 8 <= co {
            mix_block::<8>(rows, wt, co, bias, ob, px, p, out);
            ob += 8;
        }
        while ob + 4 <= co {
            mix_block::<4>(rows, wt, co, bias, ob, px, p, out);
            ob += 4;
        }
        while ob < co {
            mix_block::<1>(rows, wt, co, bias, ob, px, p, out);
            ob += 1;
        }
    }
}

/// Adds the dot products of `a[o0..o0 + OB]` with `b[m0..m0 + MB]` to `acc`
/// (`[a.len()][b.len()]`).
fn dots_block<const OB: usize, const MB: usize>(a: &[&[f32]], b: &[&[f32]], o0: usize, m0: usize, acc: &mut [f64]) {
    let p = a[0].len();
    let mut lanes = [[[0f64; LANES]; MB]; OB];
    for px in (0..p).step_by(LANES) {
        let mut bv = [[0f64; LANES]; MB];
        for (j, v) in bv.iter_mut().enumerate() {
            let src = &b[m0 + j][px..px + LANES];
            for l in 0..LANES {
                v[l] = src[l] as f64;
            }
        }
        for q in 0..OB {
            let src = &a[o0 + q][px..px + LANES];
            let mut av = [0f64; LANES];
            for l in 0..LANES {
                av[l] = src[l] as f64;
            }
            for j in 0..MB {
                for l in 0..LANES {
                    lanes[q][j][l] += av[l] * bv[j][l];
                }
            }
        }
    }
    let nb = b.len();
    for q in 0..OB {
        for j in 0..MB {
            acc[(o0 + q) * nb + m0 + j] += lanes[q][j].iter().sum::<f64>();
        }
    }
}

/// `acc[o][m] += <a[o], b[m]>` over rows whose length is a multiple of 8.
fn cross_dots(a: &[&[f32]], b: &[&[f32]], acc: &mut [f64]) {
    let (na, nb) = (a.len(), b.len());
    let mut o = 0;
    while o < na {
        let ob = if o + 4 <= na { 4 } else { 1 };
        let mut m = 0;
        while m < nb {
            let mb = if m + 2 <= nb { 2 } else { 1 };
            match (ob, mb) {
                (4, 2) => dots_block::<4, 2>(a, b, o, m, acc),
                (4, _) => dots_block::<4, 1>(a, b, o, m, acc),
                (_, 2) => dots_block::<1, 2>(a, b, o, m, acc),
                _ => dots_block::<1, 1>(a, b, o, m, acc),
            }
            m += mb;
        }
        o += ob;
    }
}

/// Register-blocked kernel: `OB` output channels by 8 output pixels.
#[allow(clippy::too_many_arguments)]
fn conv2d_block<const OB: usize>(
    xp: &[f64],
    wrep: &[f64],
    bias: Option<&[f32]>,
    d: &Conv2dDims,
    ob: usize,
    y: usize,
    xb: usize,
    out: &mut [f32],
) {
    let (k, co) = (d.k, d.co);
    let wp = d.w + k - 1;
    let hp = d.h + k - 1;
    let mut acc = [[0f64; LANES]; OB];
    for (q, a) in acc.iter_mut().enumerate() {
        *a = [bias.map_or(0.0, |b| b[ob + q] as f64); LANES];
    }
    for ci in 0..d.c {
        for ky in 0..k {
            let row = &xp[(ci * hp + y + ky) * wp + xb..];
            for kx in 0..k {
                let s: &[f64; LANES] = row[kx..kx + LANES].try_into().expect("lane slice");
                let wv: &[f64; OB] = wrep[((ci * k + ky) * k + kx) * co + ob..][..OB]
                    .try_into()
                    .expect("weight slice");
                for q in 0..OB {
                    for l in 0..LANES {
                        acc[q][l] += wv[q] * s[l];
                    }
                }
            }
        }
    }
    let p = d.h * d.w;
    for (q, a) in acc.iter().enumerate() {
        let dst = &mut out[(ob + q) * p + y * d.w + xb..][..LANES];
        dst.iter_mut().zip(a).for_each(|(o, v)| *o = *v as f32);
    }
}

/// Accumulates `dL/dkernel` for output channels `o..o + OB` and input
/// channel `ci` of one frame into `gk`.
fn kernel_grad_block<const OB: usize, const K: usize>(
    xp: &[f64],
    g: &[f32],
    d: &Conv2dDims,
    o: usize,
    ci: usize,
    gk: &mut [f64],
) {
    let (h, w) = (d.h, d.w);
    let wp = w + K - 1;
    let hp = h + K - 1;
    let p = h * w;
    let plane = &xp[ci * hp * wp..][..hp * wp];
    for ky in 0..K {
        let mut acc = [[[0f64; LANES]; K]; OB];
        for y in 0..h {
            let row = &plane[(y + ky) * wp..][..wp];
            for xb in (0..w).step_by(LANES) {
                let mut gv = [[0f64; LANES]; OB];
                for q in 0..OB {
                    let src = &g[(o + q) * p + y * w + xb..][..LANES];
                    for l in 0..LANES {
                        gv[q][l] = src[l] as f64;
                    }
                }
                for kx in 0..K {
                    let s: &[f64; LANES] = row[xb + kx..xb + kx + LANES].try_into().expect("lane slice");
                    for q in 0..OB {
                        for l in 0..LANES {
                            acc[q][kx][l] += gv[q][l] * s[l];
                        }
                    }
                }
            }
        }
        for q in 0..OB {
            for kx in 0..K {
                gk[((o + q) * d.c + ci) * K * K + ky * K + kx] += acc[q][kx].iter().sum::<f64>();
            }
        }
    }
}

fn conv2d_forward(x: &[f32], k: &[f32], bias: Option<&[f32]>, d: &Conv2dDims) -> Vec<f32> {
    let p = d.plane();
    let (h, w, r, kk) = (d.h, d.w, d.k / 2, d.k);
    let mut out = vec![0f32; d.n * d.co * p];
    if kk == 1 && p.is_multiple_of(LANES) {
        let wt: Vec<f64> = (0..d.c * d.co).map(|i| k[(i % d.co) * d.c + i / d.co] as f64).collect();
        for ni in 0..d.n {
            let rows: Vec<&[f32]> = (0..d.c).map(|ci| &x[(ni * d.c + ci) * p..][..p]).collect();
            channel_mix(&rows, &wt, d.co, bias, p, &mut out[ni * d.co * p..][..d.co * p]);
        }
        return out;
    }
    if w % LANES == 0 {
        // weights as [ci][ky][kx][o]
        let mut wrep = vec![0f64; k.len()];
        for o in 0..d.co {
            for ci in 0..d.c {
                for t in 0..kk * kk {
                    wrep[(ci * kk * kk + t) * d.co + o] = k[(o * d.c + ci) * kk * kk + t] as f64;
                }
            }
        }
        for ni in 0..d.n {
            let xp = pad_planes(&x[ni * d.c * p..][..d.c * p], d.c, h, w, r);
            let frame_out = &mut out[ni * d.co * p..][..d.co * p];
            for y in 0..h {
                for xb in (0..w).step_by(LANES) {
                    let mut ob = 0;
                    while ob + 8 <= d.co {
                        conv2d_block::<8>(&xp, &wrep, bias, d, ob, y, xb, frame_out);
                        ob += 8;
                    }
                    while ob + 4 <= d.co {
                        conv2d_block::<4>(&xp, &wrep, bias, d, ob, y, xb, frame_out);
                        ob += 4;
                    }
                    while ob < d.co {
                        conv2d_block::<1>(&xp, &wrep, bias, d, ob, y, xb, frame_out);
                        ob += 1;
                    }
                }
            }
        }
        return out;
    }

    let mut acc = vec![0f64; d.co * w];
    let mut row = vec![0f64; w + 2 * r];
    for ni in 0..d.n {
        for y in 0..h {
            for o in 0..d.co {
                acc[o * w..(o + 1) * w].fill(bias.map_or(0.0, |b| b[o] as f64));
            }
            for ci in 0..d.c {
                for ky in 0..kk {
                    let Some(sy) = (y + ky).checked_sub(r).filter(|&sy| sy < h) else {
                        continue;
                    };
                    load_padded(&mut row, &x[(ni * d.c + ci) * p + sy * w..][..w], r);
                    for kx in 0..kk {
                        let src = &row[kx..kx + w];
                        for o in 0..d.co {
                            let wv = k[((o * d.c + ci) * kk + ky) * kk + kx] as f64;
                            axpy64(&mut acc[o * w..(o + 1) * w], wv, src);
                        }
                    }
                }
            }
            for o in 0..d.co {
                let dst = &mut out[(ni * d.co + o) * p + y * w..][..w];
                dst.iter_mut().zip(&acc[o * w..(o + 1) * w]).for_each(|(o, a)| *o = *a as f32);
            }
        }
    }
    out
}

/// Returns `[grad_input, grad_kernel, grad_bias]`.
pub(crate) fn conv2d_backward(input: &Tensor, kernel: &Tensor, g: &[f32]) -> Vec<Vec<f32>> {
    let d = conv2d_dims(input.shape(), kernel.shape()).expect("validated in forward");
    let (x, k) = (input.data(), kernel.data());
    let p = d.plane();
    let (h, w, r, kk) = (d.h, d.w, d.k / 2, d.k);

    // Input gradient: same-padded convolution of g with the flipped, transposed kernel.
    let mut kt = vec![0f32; k.len()];
    for o in 0..d.co {
        for ci in 0..d.c {
            for ky in 0..kk {
                for kx in 0..kk {
                    kt[((ci * d.co + o) * kk + (kk - 1 - ky)) * kk + (kk - 1 - kx)] =
                        k[((o * d.c + ci) * kk + ky) * kk + kx];
                }
            }
        }
    }
    let dt = Conv2dDims {
        n: d.n,
        c: d.co,
        co: d.c,
        h,
        w,
        k: kk,
    };
    let gin = conv2d_forward(g, &kt, None, &dt);

    let mut gk = vec![0f64; k.len()];
    if kk == 1 && p.is_multiple_of(LANES) {
        for ni in 0..d.n {
            let gr: Vec<&[f32]> = (0..d.co).map(|o| &g[(ni * d.co + o) * p..][..p]).collect();
            let xr: Vec<&[f32]> = (0..d.c).map(|ci| &x[(ni * d.c + ci) * p..][..p]).collect();
            cross_dots(&gr, &xr, &mut gk);
        }
    } else if w % LANES == 0 && kk == 3 {
        for ni in 0..d.n {
            let xp = pad_planes(&x[ni * d.c * p..][..d.c * p], d.c, h, w, r);
            let gf = &g[ni * d.co * p..][..d.co * p];
            let mut o = 0;
            while o + 4 <= d.co {
                for ci in 0..d.c {
                    kernel_grad_block::<4, 3>(&xp, gf, &d, o, ci, &mut gk);
                }
                o += 4;
            }
            while o < d.co {
                for ci in 0..d.c {
                    kernel_grad_block::<1, 3>(&xp, gf, &d, o, ci, &mut gk);
                }
                o += 1;
            }
        }
    } else {
        let mut grow = vec![0f64; d.co * w];
        let mut row = vec![0f64; w + 2 * r];
        for ni in 0..d.n {
            for y in 0..h {
                for o in 0..d.co {
                    let src = &g[(ni * d.co + o) * p + y * w..][..w];
                    grow[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d = *s as f64);
                }
                for ci in 0..d.c {
                    for ky in 0..kk {
                        let Some(sy) = (y + ky).checked_sub(r).filter(|&sy| sy < h) else {
                            continue;
                        };
                        load_padded(&mut row, &x[(ni * d.c + ci) * p + sy * w..][..w], r);
                        for kx in 0..kk {
                            let src = &row[kx..kx + w];
                            for o in 0..d.co {
                                gk[((o * d.c + ci) * kk + ky) * kk + kx] += dot64(&grow[o * w..(o + 1) * w], src);
                            }
                        }
                    }
                }
            }
        }
    }
    let gk = gk.into_iter().map(|v| v as f32).collect();

    let gb = (0..d.co)
        .map(|o| (0..d.n).map(|ni| sum_f64(&g[(ni * d.co + o) * p..][..p])).sum::<f64>() as f32)
        .collect();
    vec![gin, gk, gb]
}

struct TemporalDims {
    t: usize,
    c: usize,
    co: usize,
    plane: usize,
    k: usize,
}

fn temporal_dims(input: &[usize], kernel: &[usize]) -> Result<TemporalDims, AutodiffError> {
    let [t, c, h, w] = *input else {
        return Err(AutodiffError::invalid("conv_temporal", format!("input shape {input:?}")));
    };
    let [co, ci, k] = *kernel else {
        return Err(AutodiffError::invalid("conv_temporal", format!("kernel shape {kernel:?}")));
    };
    if ci != c {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv_temporal",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if k % 2 == 0 || k > t {
        return Err(AutodiffError::invalid("conv_temporal", format!("temporal kernel {k} with {t} frames")));
    }
    Ok(TemporalDims { t, c, co, plane: h * w, k })
}

fn conv_temporal_forward(x: &[f32], k: &[f32], bias: Option<&[f32]>, d: &TemporalDims) -> Vec<f32> {
    let p = d.plane;
    let r = (d.k / 2) as isize;
    let mut out = vec![0f32; d.t * d.co * p];
    if p.is_multiple_of(LANES) {
        for t in 0..d.t {
            let mut rows = Vec::with_capacity(d.c * d.k);
            let mut wt = Vec::with_capacity(d.c * d.k * d.co);
            for j in 0..d.k {
                let tt = t as isize + j as isize - r;
                if tt < 0 || tt >= d.t as isize {
                    continue;
                }
                for ci in 0..d.c {
                    rows.push(&x[(tt as usize * d.c + ci) * p..][..p]);
                    wt.extend((0..d.co).map(|o| k[(o * d.c + ci) * d.k + j] as f64));
                }
            }
            channel_mix(&rows, &wt, d.co, bias, p, &mut out[t * d.co * p..][..d.co * p]);
        }
        return out;
    }
    let mut acc = vec![0f64; p];
    for t in 0..d.t {
        for o in 0..d.co {
            acc.fill(bias.map_or(0.0, |b| b[o] as f64));
            for ci in 0..d.c {
                for j in 0..d.k {
                    let tt = t as isize + j as isize - r;
                    if tt < 0 || tt >= d.t as isize {
                        continue;
                    }
                    let wv = k[(o * d.c + ci) * d.k + j] as f64;
                    axpy(&mut acc, wv, &x[(tt as usize * d.c + ci) * p..][..p]);
                }
            }
            let dst = &mut out[(t * d.co + o) * p..][..p];
            dst.iter_mut().zip(&acc).for_each(|(o, a)| *o = *a as f32);
        }
    }
    out
}

pub(crate) fn conv_temporal_backward(input: &Tensor, kernel: &Tensor, g: &[f32]) -> Vec<Vec<f32>> {
    let d = temporal_dims(input.shape(), kernel.shape()).expect("validated in forward");
    let (x, k) = (input.data(), kernel.data());
    let p = d.plane;
    let r = (d.k / 2) as isize;
    let gb = (0..d.co)
        .map(|o| (0..d.t).map(|t| sum_f64(&g[(t * d.co + o) * p..][..p])).sum::<f64>() as f32)
        .collect();

    let mut gin = vec![0f32; x.len()];
    let mut gk64 = vec![0f64; k.len()];
    if p.is_multiple_of(LANES) {
        for tt in 0..d.t {
            let mut rows = Vec::with_capacity(d.co * d.k);
            let mut wt = Vec::with_capacity(d.co * d.k * d.c);
            for j in 0..d.k {
                // output frame t reads input frame tt = t + j - r
                let t = tt as isize - j as isize + r;
                if t < 0 || t >= d.t as isize {
                    continue;
                }
                for o in 0..d.co {
                    rows.push(&g[(t as usize * d.co + o) * p..][..p]);
                    wt.extend((0..d.c).map(|ci| k[(o * d.c + ci) * d.k + j] as f64));
                }
            }
            channel_mix(&rows, &wt, d.c, None, p, &mut gin[tt * d.c * p..][..d.c * p]);
        }
        let mut acc = vec![0f64; d.co * d.c];
        for j in 0..d.k {
            acc.fill(0.0);
            for t in 0..d.t {
                let tt = t as isize + j as isize - r;
                if tt < 0 || tt >= d.t as isize {
                    continue;
                }
                let gr: Vec<&[f32]> = (0..d.co).map(|o| &g[(t * d.co + o) * p..][..p]).collect();
                let xr: Vec<&[f32]> = (0..d.c).map(|ci| &x[(tt as usize * d.c + ci) * p..][..p]).collect();
                cross_dots(&gr, &xr, &mut acc);
            }
            for o in 0..d.co {
                for ci in 0..d.c {
                    gk64[(o * d.c + ci) * d.k + j] = acc[o * d.c + ci];
                }
            }
        }
        let gk = gk64.into_iter().map(|v| v as f32).collect();
        return vec![gin, gk, gb];
    }

    let mut acc = vec![0f64; p];
    for tt in 0..d.t {
        for ci in 0..d.c {
            acc.fill(0.0);
            for o in 0..d.co {
                for j in 0..d.k {
                    let t = tt as isize - j as isize + r;
                    if t < 0 || t >= d.t as isize {
                        continue;
                    }
                    let wv = k[(o * d.c + ci) * d.k + j] as f64;
                    axpy(&mut acc, wv, &g[(t as usize * d.co + o) * p..][..p]);
                }
            }
            let dst = &mut gin[(tt * d.c + ci) * p..][..p];
            dst.iter_mut().zip(&acc).for_each(|(o, a)| *o = *a as f32);
        }
    }
    for o in 0..d.co {
        for ci in 0..d.c {
            for j in 0..d.k {
                let mut s = 0f64;
                for t in 0..d.t {
                    let tt = t as isize + j as isize - r;
                    if tt < 0 || tt >= d.t as isize {
                        continue;
                    }
                    s += dot(&g[(t * d.co + o) * p..][..p], &x[(tt as usize * d.c + ci) * p..][..p]);
                }
                gk64[(o * d.c + ci) * d.k + j] = s;
            }
        }
    }
    let gk = gk64.into_iter().map(|v| v as f32).collect();
    vec![gin, gk, gb]
}

pub(crate) fn avg_pool2_backward(in_shape: &[usize], g: &[f32]) -> Vec<f32> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes: usize = in_shape[..r - 2].iter().product();
    let mut out = vec![0f32; planes * h * w];
    for pl in 0..planes {
        for y in 0..h {
            for x in 0..w {
                out[pl * h * w + y * w + x] = 0.25 * g[pl * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward(in_shape: &[usize], g: &[f32]) -> Vec<f32> {
    let [t, c, h, w] = *in_shape else { unreachable!("validated in forward") };
    let scale = 1.0 / (t * h * w) as f64;
    let mut out = vec![0f32; t * c * h * w];
    for ti in 0..t {
        for ci in 0..c {
            let v = (g[ci] as f64 * scale) as f32;
            out[(ti * c + ci) * h * w..][..h * w].fill(v);
        }
    }
    out
}

pub(crate) fn linear_backward(input: &Tensor, weight: &Tensor, g: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    let (x, wt) = (input.data(), weight.data());
    let gi = (0..n)
        .map(|j| (0..m).map(|i| wt[i * n + j] as f64 * g[i] as f64).sum::<f64>() as f32)
        .collect();
    let mut gw = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            gw[i * n + j] = (g[i] as f64 * x[j] as f64) as f32;
        }
    }
    (gi, gw)
}

impl Tape {
    /// Same-padded 2-D convolution over `[C, H, W]` or frame-batched `[N, C, H, W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let d = conv2d_dims(self.shape(input), self.shape(kernel))?;
        check_bias("conv2d", bias.map(|b| self.value(b)), d.co)?;
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let mut shape = self.shape(input).to_vec();
        let rank = shape.len();
        shape[rank - 3] = d.co;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// Same-padded 1-D convolution along the frame axis of `[T, C, H, W]`,
    /// applied independently at every pixel.
    pub fn conv_temporal(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let d = temporal_dims(self.shape(input), self.shape(kernel))?;
        check_bias("conv_temporal", bias.map(|b| self.value(b)), d.co)?;
        let out = conv_temporal_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let mut shape = self.shape(input).to_vec();
        shape[1] = d.co;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::ConvTemporal {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// 2x2 average pooling over the last two (even) dimensions.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 1].is_multiple_of(2) || !shape[r - 2].is_multiple_of(2) {
            return Err(AutodiffError::invalid("avg_pool2", format!("shape {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes: usize = shape[..r - 2].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0f32; planes * oh * ow];
        for pl in 0..planes {
            let src = &x[pl * h * w..][..h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx] as f64
                        + src[2 * y * w + 2 * xx + 1] as f64
                        + src[(2 * y + 1) * w + 2 * xx] as f64
                        + src[(2 * y + 1) * w + 2 * xx + 1] as f64;
                    out[pl * oh * ow + y * ow + xx] = (0.25 * s) as f32;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::AvgPool2(a.0)))
    }

    /// Mean over frames and pixels of `[T, C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let [t, c, h, w] = shape[..] else {
            return Err(AutodiffError::invalid("global_avg_pool", format!("shape {shape:?}")));
        };
        let x = self.value(a).data();
        let out = (0..c)
            .map(|ci| {
                let s: f64 = (0..t).map(|ti| sum_f64(&x[(ti * c + ci) * h * w..][..h * w])).sum();
                (s / (t * h * w) as f64) as f32
            })
            .collect();
        let v = Tensor::new(vec![c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(a.0)))
    }

    /// `weight · input + bias` for `weight: [M, N]`, `input: [N]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let ok = ws.len() == 2 && xs == [ws[1]] && bs == [ws[0]];
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                left: ws.to_vec(),
                right: xs.to_vec(),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let (x, w, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let out = (0..m)
            .map(|i| (b[i] as f64 + dot(&w[i * n..(i + 1) * n], x)) as f32)
            .collect();
        let v = Tensor::new(vec![m], out)?;
        Ok(self.push(
            v,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        ))
    }
}
