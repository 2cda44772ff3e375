//! Raw numeric kernels on channel-major `[C, H, W]` buffers.
//!
//! Every convolution here is a 3x3, stride 1, zero-padded "same" convolution.
//! The three entry points are the partial derivatives of one trilinear form
//! `T(x, w, g) = <g, conv(x, w)>`, which is what lets the tape differentiate
//! each of them again.

pub const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

/// Unfold `x` (`[c, h, w]`) into a `[c * 9, h * w]` patch matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * TAPS * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ch * TAPS + ky * KSIZE + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &plane[si as usize * w..si as usize * w + w];
                    let dst_row = &mut dst[i * w..i * w + w];
                    // column shift of kx - 1 with zero fill
                    match kx {
                        0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst_row.copy_from_slice(src_row),
                        _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// `c = a * b` with explicit strides, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: slice lengths cover every (row, col) reachable with the given strides.
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
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y[cout, h, w] = conv(x[cin, h, w], wt[cout, cin, 3, 3])`.
pub fn conv_forward(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize) -> Vec<f64> {
    let hw = h * w;
    let cols = im2col(x, cin, h, w);
    let mut y = vec![0.0; cout * hw];
    // computed as y^T = cols^T * wt^T, which suits the small channel counts
    gemm(hw, cin * TAPS, cout, &cols, (1, hw), wt, (1, cin * TAPS), &mut y, (1, hw));
    y
}

/// Adjoint of [`conv_forward`] in `x`: `gx[cin, h, w]` from `g[cout, h, w]`.
pub fn conv_input_grad(g: &[f64], cout: usize, h: usize, w: usize, wt: &[f64], cin: usize) -> Vec<f64> {
    // same conv with the kernel transposed over channels and flipped spatially
    let mut flipped = vec![0.0; cin * cout * TAPS];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..TAPS {
                flipped[(c * cout + o) * TAPS + (TAPS - 1 - t)] = wt[(o * cin + c) * TAPS + t];
            }
        }
    }
    conv_forward(g, cout, h, w, &flipped, cin)
}

/// Adjoint of [`conv_forward`] in the kernel: `gw[cout, cin, 3, 3]`.
pub fn conv_weight_grad(x: &[f64], cin: usize, h: usize, w: usize, g: &[f64], cout: usize) -> Vec<f64> {
    let hw = h * w;
    let cols = im2col(x, cin, h, w);
    let mut gw = vec![0.0; cout * cin * TAPS];
    // gw = g[cout, hw] * cols^T[hw, cin*9]
    gemm(cout, hw, cin * TAPS, g, (hw, 1), &cols, (1, hw), &mut gw, (cin * TAPS, 1));
    gw
}

/// One output sample of a separable bilinear resampler.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centred bilinear taps mapping `src` samples onto `dst` samples.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    if src == dst {
        return (0..dst).map(|i| Tap { lo: i, hi: i, frac: 0.0 }).collect();
    }
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of `[c, h, w]` to `[c, oh, ow]`.
pub fn resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, ry) in ty.iter().enumerate() {
            let r0 = &plane[ry.lo * w..ry.lo * w + w];
            let r1 = &plane[ry.hi * w..ry.hi * w + w];
            for (j, rx) in tx.iter().enumerate() {
                let top = r0[rx.lo] * (1.0 - rx.frac) + r0[rx.hi] * rx.frac;
                let bot = r1[rx.lo] * (1.0 - rx.frac) + r1[rx.hi] * rx.frac;
                dst[i * ow + j] = top * (1.0 - ry.frac) + bot * ry.frac;
            }
        }
    }
    out
}

/// Transpose of [`resize`]: scatters `[c, oh, ow]` back onto `[c, h, w]`.
pub fn resize_adjoint(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return g.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (i, ry) in ty.iter().enumerate() {
            for (j, rx) in tx.iter().enumerate() {
                let v = src[i * ow + j];
                let top = v * (1.0 - ry.frac);
                let bot = v * ry.frac;
                plane[ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                plane[ry.lo * w + rx.hi] += top * rx.frac;
                plane[ry.hi * w + rx.lo] += bot * (1.0 - rx.frac);
                plane[ry.hi * w + rx.hi] += bot * rx.frac;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * h * w];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let si = i as isize + ky as isize - 1;
                                let sj = j as isize + kx as isize - 1;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * cin + c) * 3 + ky) * 3 + kx] * x[(c * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    y[(o * h + i) * w + j] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * k).sin() * 1.3).fract()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x = ramp(cin * h * w, 0.7);
        let wt = ramp(cout * cin * 9, 1.9);
        let fast = conv_forward(&x, cin, h, w, &wt, cout);
        let slow = naive_conv(&x, cin, h, w, &wt, cout);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoints_share_one_trilinear_form() {
        let (cin, cout, h, w) = (3, 2, 4, 6);
        let x = ramp(cin * h * w, 0.3);
        let wt = ramp(cout * cin * 9, 2.3);
        let g = ramp(cout * h * w, 1.1);
        let t = dot(&g, &conv_forward(&x, cin, h, w, &wt, cout));
        let tx = dot(&x, &conv_input_grad(&g, cout, h, w, &wt, cin));
        let tw = dot(&wt, &conv_weight_grad(&x, cin, h, w, &g, cout));
        assert!((t - tx).abs() < 1e-10);
        assert!((t - tw).abs() < 1e-10);
    }

    #[test]
    fn resize_adjoint_is_transpose() {
        let (c, h, w, oh, ow) = (2, 5, 7, 8, 3);
        let x = ramp(c * h * w, 0.9);
        let g = ramp(c * oh * ow, 0.4);
        let lhs = dot(&g, &resize(&x, c, h, w, oh, ow));
        let rhs = dot(&x, &resize_adjoint(&g, c, h, w, oh, ow));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
