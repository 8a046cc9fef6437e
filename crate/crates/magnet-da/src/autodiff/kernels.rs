//! Raw numeric kernels behind the tape ops.
//!
//! Plain sequential loops with fixed accumulation order: forward results must
//! be bit-identical across runs, so nothing here is allowed to parallelize or
//! reassociate reductions. Convolution goes through im2col + GEMM, which is
//! where nearly all training time is spent.

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product over eight independent accumulator lanes. The fixed lane
/// structure makes the reduction order deterministic while breaking the
/// serial floating-point dependency chain so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (av, bv) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            lanes[l] += av[l] * bv[l];
        }
    }
    let mut tail = 0.0;
    for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
        tail += av * bv;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Squared Euclidean distance with the same eight-lane reduction as [`dot`].
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (av, bv) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            let d = av[l] - bv[l];
            lanes[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
        let d = av - bv;
        tail += d * d;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// `c += a * b^T` for row-major `a: m x k`, `b: n x k`, `c: m x n`.
///
/// `b` is streamed once (j outer); `a` is expected to be the small operand.
pub fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (j, brow) in b.chunks_exact(k).enumerate() {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c += a^T * b` for row-major `a: k x m`, `b: k x n`, `c: m x n`.
///
/// Each output row is written once (i outer); `b` is expected to be small
/// enough to stay cached across the sweep.
pub fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution/pooling axis.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Unfold one `C x H x W` sample into a `(C*kh*kw) x (oh*ow)` patch matrix.
///
/// Row `(c*kh + i)*kw + j`, column `y*ow + x` holds
/// `input[c, y*stride - pad + i, x*stride - pad + j]`, zero outside bounds.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut r = 0;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for y in 0..oh {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in drow.iter_mut() {
                            *v = 0.0;
                        }
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, v) in drow.iter_mut().enumerate() {
                        let ix = (x * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto one input sample.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accumulate(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(out.len(), c * h * w);
    let mut r = 0;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for y in 0..oh {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[y * ow..(y + 1) * ow];
                    for (x, &g) in srow.iter().enumerate() {
                        let ix = (x * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Direct 3x3 stride-1 pad-1 convolution of one sample, `out += conv(x, w)`.
///
/// Every (filter, channel, tap) contributes one shifted row-wise axpy over
/// the plane, which keeps the inner loops contiguous; the im2col path stays
/// for general shapes.
pub fn conv3x3_forward(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], f: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(weight.len(), f * c * 9);
    debug_assert_eq!(out.len(), f * h * w);
    for fi in 0..f {
        let oplane = &mut out[fi * h * w..(fi + 1) * h * w];
        for ci in 0..c {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let wbase = (fi * c + ci) * 9;
            for ki in 0..3usize {
                for kj in 0..3usize {
                    let wv = weight[wbase + ki * 3 + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    shifted_axpy(oplane, xplane, h, w, ki, kj, wv);
                }
            }
        }
    }
}

/// `d_x` for the direct 3x3 path: the transposed stencil of the forward.
pub fn conv3x3_backward_input(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    f: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(g.len(), f * h * w);
    debug_assert_eq!(dx.len(), c * h * w);
    for ci in 0..c {
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for fi in 0..f {
            let gplane = &g[fi * h * w..(fi + 1) * h * w];
            let wbase = (fi * c + ci) * 9;
            for ki in 0..3usize {
                for kj in 0..3usize {
                    let wv = weight[wbase + ki * 3 + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    // Flipped taps: output pixel (y, x) of the forward read
                    // input (y + ki - 1, x + kj - 1), so input gradients read
                    // output gradients at the mirrored offset.
                    shifted_axpy(dplane, gplane, h, w, 2 - ki, 2 - kj, wv);
                }
            }
        }
    }
}

/// `d_weight` accumulation for the direct 3x3 path.
pub fn conv3x3_backward_weight(
    g: &[f64],
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    dw: &mut [f64],
) {
    debug_assert_eq!(g.len(), f * h * w);
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(dw.len(), f * c * 9);
    for fi in 0..f {
        let gplane = &g[fi * h * w..(fi + 1) * h * w];
        for ci in 0..c {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let wbase = (fi * c + ci) * 9;
            for ki in 0..3usize {
                for kj in 0..3usize {
                    let mut acc = 0.0;
                    let (oy0, oy1) = row_span(h, ki);
                    let (ox0, ox1) = row_span(w, kj);
                    for oy in oy0..oy1 {
                        let iy = oy + ki - 1;
                        let grow = &gplane[oy * w + ox0..oy * w + ox1];
                        let xrow = &xplane[iy * w + ox0 + kj - 1..iy * w + ox1 + kj - 1];
                        acc += dot(grow, xrow);
                    }
                    dw[wbase + ki * 3 + kj] += acc;
                }
            }
        }
    }
}

/// Valid output interval along one axis for tap offset `k - 1` (pad 1).
#[inline]
fn row_span(extent: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, extent),
        1 => (0, extent),
        _ => (0, extent - 1),
    }
}

#[inline]
fn shifted_axpy(out: &mut [f64], src: &[f64], h: usize, w: usize, ki: usize, kj: usize, wv: f64) {
    let (oy0, oy1) = row_span(h, ki);
    let (ox0, ox1) = row_span(w, kj);
    for oy in oy0..oy1 {
        let iy = oy + ki - 1;
        let orow = &mut out[oy * w + ox0..oy * w + ox1];
        let srow = &src[iy * w + ox0 + kj - 1..iy * w + ox1 + kj - 1];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o += wv * s;
        }
    }
}

/// Squared Euclidean distances between rows of `a: na x d` and `b: nb x d`.
pub fn pairwise_sq_dists(a: &[f64], b: &[f64], na: usize, nb: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; na * nb];
    for i in 0..na {
        let ra = &a[i * d..(i + 1) * d];
        let orow = &mut out[i * nb..(i + 1) * nb];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = sq_dist(ra, &b[j * d..(j + 1) * d]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let want = naive_gemm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        // a * b == a * (b^T)^T
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_a_bt(&a, &bt, &mut c2, m, k, n);
        assert_eq!(c2, want);

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_at_b(&at, &b, &mut c3, m, k, n);
        assert_eq!(c3, want);
    }

    #[test]
    fn im2col_round_trips_through_col2im_as_multiplicity() {
        // col2im(im2col(x)) counts how many patches each pixel belongs to,
        // so with all-ones cols every interior pixel accumulates kh*kw.
        let (c, h, w) = (1, 4, 4);
        let (kh, kw, stride, pad) = (3, 3, 1, 1);
        let x = vec![1.0; c * h * w];
        let oh = conv_out_extent(h, kh, stride, pad);
        let ow = conv_out_extent(w, kw, stride, pad);
        let mut cols = vec![0.0; c * kh * kw * oh * ow];
        im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
        let ones = vec![1.0; cols.len()];
        let mut back = vec![0.0; c * h * w];
        col2im_accumulate(&ones, c, h, w, kh, kw, stride, pad, &mut back);
        // Center pixels of a 4x4 with 3x3/pad1 belong to 9 patches.
        assert_eq!(back[5], 9.0);
        // Corner pixels belong to 4.
        assert_eq!(back[0], 4.0);
    }

    #[test]
    fn pairwise_dists_match_hand_computation() {
        let a = [0.0, 0.0, 3.0, 4.0]; // rows (0,0), (3,4)
        let b = [0.0, 0.0];
        let d = pairwise_sq_dists(&a, &b, 2, 1, 2);
        assert_eq!(d, vec![0.0, 25.0]);
    }
}
