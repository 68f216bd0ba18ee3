//! Raw numeric kernels shared by the tape ops and by inference-only
//! paths (metrics feature extraction, world rendering resamples).
//!
//! All loops have a fixed iteration order so results are bitwise
//! reproducible for a given input.

use super::real::Real;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (rows dot rows)
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

pub fn conv2d_out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel {k} larger than padded input {h}x{w} (pad {pad})");
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Valid output-x range for a given kernel column: all ox with
/// 0 <= ox*stride + kx - pad < w.
#[inline]
fn ox_range(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_excl = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi_excl), hi_excl)
}

/// Cross-correlation: x[cin,h,w] * w[cout,cin,k,k] -> out[cout,oh,ow].
/// `out` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Real>(
    x: &[T],
    w: &[T],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let (oh, ow) = conv2d_out_size(h, wid, k, stride, pad);
    debug_assert_eq!(out.len(), cout * oh * ow);
    for co in 0..cout {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &x[ci * h * wid..(ci + 1) * h * wid];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let (oxl, oxh) = ox_range(wid, ow, kx, stride, pad);
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = &xplane[(iy - pad) * wid..(iy - pad + 1) * wid];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let base = kx as isize - pad as isize;
                            for ox in oxl..oxh {
                                orow[ox] += wv * xrow[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in oxl..oxh {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d wrt the input. `dx` accumulated in place.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_x<T: Real>(
    gout: &[T],
    w: &[T],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let (oh, ow) = conv2d_out_size(h, wid, k, stride, pad);
    for co in 0..cout {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dxplane = &mut dx[ci * h * wid..(ci + 1) * h * wid];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let (oxl, oxh) = ox_range(wid, ow, kx, stride, pad);
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let dxrow = &mut dxplane[(iy - pad) * wid..(iy - pad + 1) * wid];
                        for ox in oxl..oxh {
                            dxrow[ox * stride + kx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d wrt the weights. `dw` accumulated in place.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_w<T: Real>(
    gout: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [T],
) {
    let (oh, ow) = conv2d_out_size(h, wid, k, stride, pad);
    for co in 0..cout {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &x[ci * h * wid..(ci + 1) * h * wid];
            for ky in 0..k {
                for kx in 0..k {
                    let (oxl, oxh) = ox_range(wid, ow, kx, stride, pad);
                    let mut acc = T::ZERO;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[(iy - pad) * wid..(iy - pad + 1) * wid];
                        for ox in oxl..oxh {
                            acc += grow[ox] * xrow[ox * stride + kx - pad];
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// 3-D cross-correlation over [Cin,T,H,W] with per-axis stride and a
/// symmetric pad of k/2. Inference-only (fixed random feature nets).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_fwd<T: Real>(
    x: &[T],
    w: &[T],
    cin: usize,
    t: usize,
    h: usize,
    wid: usize,
    cout: usize,
    k: usize,
    stride: (usize, usize, usize),
    out: &mut [T],
) {
    let pad = k / 2;
    let ot = (t + 2 * pad - k) / stride.0 + 1;
    let oh = (h + 2 * pad - k) / stride.1 + 1;
    let ow = (wid + 2 * pad - k) / stride.2 + 1;
    debug_assert_eq!(out.len(), cout * ot * oh * ow);
    debug_assert_eq!(w.len(), cout * cin * k * k * k);
    for co in 0..cout {
        for oz in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ci in 0..cin {
                        for kz in 0..k {
                            let iz = oz * stride.0 + kz;
                            if iz < pad || iz - pad >= t {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = oy * stride.1 + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox * stride.2 + kx;
                                    if ix < pad || ix - pad >= wid {
                                        continue;
                                    }
                                    acc += x[((ci * t + iz - pad) * h + iy - pad) * wid + ix - pad]
                                        * w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((co * ot + oz) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

/// Output extents of [`conv3d_fwd`].
pub fn conv3d_out_size(
    t: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: (usize, usize, usize),
) -> (usize, usize, usize) {
    let pad = k / 2;
    ((t + 2 * pad - k) / stride.0 + 1, (h + 2 * pad - k) / stride.1 + 1, (w + 2 * pad - k) / stride.2 + 1)
}

/// Backward warp by a normalized flow field with border clamping:
/// out[c,y,x] = bilinear(src, p(y,x) + flow(y,x)).
///
/// Flow is a normalized-coordinate delta: a value of 2/(extent-1) moves
/// one pixel. The sample position is formed directly in pixel space so
/// zero flow reproduces the source bitwise.
pub fn grid_sample_fwd<T: Real>(
    src: &[T],
    flow: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    debug_assert_eq!(flow.len(), 2 * h * w);
    debug_assert_eq!(out.len(), c * h * w);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let fx = flow[i].to_f64();
            let fy = flow[plane + i].to_f64();
            let px = (x as f64 + fx * 0.5 * (w as f64 - 1.0)).clamp(0.0, w as f64 - 1.0);
            let py = (y as f64 + fy * 0.5 * (h as f64 - 1.0)).clamp(0.0, h as f64 - 1.0);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = T::from_f64(px - x0 as f64);
            let ay = T::from_f64(py - y0 as f64);
            let bx = T::ONE - ax;
            let by = T::ONE - ay;
            for ch in 0..c {
                let s = &src[ch * plane..(ch + 1) * plane];
                let v = by * (bx * s[y0 * w + x0] + ax * s[y0 * w + x1])
                    + ay * (bx * s[y1 * w + x0] + ax * s[y1 * w + x1]);
                out[ch * plane + i] = v;
            }
        }
    }
}

/// Gradients of the backward warp wrt source and flow. Either output may
/// be None when that operand does not require gradient.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_bwd<T: Real>(
    src: &[T],
    flow: &[T],
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    mut dsrc: Option<&mut [T]>,
    mut dflow: Option<&mut [T]>,
) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let fx = flow[i].to_f64();
            let fy = flow[plane + i].to_f64();
            let px_raw = x as f64 + fx * 0.5 * (w as f64 - 1.0);
            let py_raw = y as f64 + fy * 0.5 * (h as f64 - 1.0);
            let px = px_raw.clamp(0.0, w as f64 - 1.0);
            let py = py_raw.clamp(0.0, h as f64 - 1.0);
            // clamped samples sit in a flat region: zero positional grad
            let x_active = px_raw > 0.0 && px_raw < w as f64 - 1.0;
            let y_active = py_raw > 0.0 && py_raw < h as f64 - 1.0;
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = px - x0 as f64;
            let ay = py - y0 as f64;
            let (bx, by) = (1.0 - ax, 1.0 - ay);
            let mut gx = 0.0f64;
            let mut gy = 0.0f64;
            for ch in 0..c {
                let g = gout[ch * plane + i].to_f64();
                if g == 0.0 {
                    continue;
                }
                let s = &src[ch * plane..(ch + 1) * plane];
                let s00 = s[y0 * w + x0].to_f64();
                let s01 = s[y0 * w + x1].to_f64();
                let s10 = s[y1 * w + x0].to_f64();
                let s11 = s[y1 * w + x1].to_f64();
                if let Some(ds) = dsrc.as_deref_mut() {
                    let d = &mut ds[ch * plane..(ch + 1) * plane];
                    d[y0 * w + x0] += T::from_f64(g * by * bx);
                    d[y0 * w + x1] += T::from_f64(g * by * ax);
                    d[y1 * w + x0] += T::from_f64(g * ay * bx);
                    d[y1 * w + x1] += T::from_f64(g * ay * ax);
                }
                gx += g * (by * (s01 - s00) + ay * (s11 - s10));
                gy += g * (bx * (s10 - s00) + ax * (s11 - s01));
            }
            if let Some(df) = dflow.as_deref_mut() {
                // chain through pixel-coordinate scaling d(px)/d(fx)
                let sx = 0.5 * (w as f64 - 1.0);
                let sy = 0.5 * (h as f64 - 1.0);
                if x_active {
                    df[i] += T::from_f64(gx * sx);
                }
                if y_active {
                    df[plane + i] += T::from_f64(gy * sy);
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsample of a [C,H,W] tensor.
pub fn upsample2x_fwd<T: Real>(src: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let orow = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for x in 0..ow {
                orow[x] = srow[x / 2];
            }
        }
    }
}

pub fn upsample2x_bwd<T: Real>(gout: &[T], c: usize, h: usize, w: usize, dsrc: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let grow = &gout[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let drow = &mut dsrc[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for x in 0..ow {
                drow[x / 2] += grow[x];
            }
        }
    }
}

/// Row-stable softmax over the given axis of an arbitrary-shape tensor,
/// decomposed as outer x axis x inner.
pub fn softmax_fwd<T: Real>(x: &[T], outer: usize, axis: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let mut maxv = T::from_f64(f64::NEG_INFINITY);
            for a in 0..axis {
                let v = x[(o * axis + a) * inner + i];
                assert!(!v.is_nan(), "numeric error: NaN input to softmax");
                if v > maxv {
                    maxv = v;
                }
            }
            let mut sum = T::ZERO;
            for a in 0..axis {
                let idx = (o * axis + a) * inner + i;
                let e = (x[idx] - maxv).exp();
                out[idx] = e;
                sum += e;
            }
            for a in 0..axis {
                out[(o * axis + a) * inner + i] /= sum;
            }
        }
    }
}

pub fn log_softmax_fwd<T: Real>(x: &[T], outer: usize, axis: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let mut maxv = T::from_f64(f64::NEG_INFINITY);
            for a in 0..axis {
                let v = x[(o * axis + a) * inner + i];
                assert!(!v.is_nan(), "numeric error: NaN input to log_softmax");
                if v > maxv {
                    maxv = v;
                }
            }
            let mut sum = T::ZERO;
            for a in 0..axis {
                sum += (x[(o * axis + a) * inner + i] - maxv).exp();
            }
            let lse = maxv + sum.ln();
            for a in 0..axis {
                let idx = (o * axis + a) * inner + i;
                out[idx] = x[idx] - lse;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_hand_case() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        matmul_nn(&a, &b, 2, 2, 1, &mut c);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut c0 = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c0);
        // a * b == a * (b^T)^T via matmul_nt with b transposed
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut c1);
        // a * b == (a^T)^T * b via matmul_tn with a transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_tn(&at, &b, m, k, n, &mut c2);
        for i in 0..m * n {
            assert!((c0[i] - c1[i]).abs() < 1e-12);
            assert!((c0[i] - c2[i]).abs() < 1e-12);
        }
    }

    /// Direct six-loop reference convolution.
    fn conv2d_naive(
        x: &[f64],
        w: &[f64],
        cin: usize,
        h: usize,
        wid: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (oh, ow) = conv2d_out_size(h, wid, k, stride, pad);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy >= pad && ix >= pad && iy - pad < h && ix - pad < wid {
                                    acc += x[(ci * h + iy - pad) * wid + ix - pad]
                                        * w[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = crate::tensor::rng::Rng::from_seed(9);
        for &(cin, h, w, cout, k, stride, pad) in
            &[(2usize, 7usize, 6usize, 3usize, 5usize, 1usize, 2usize), (3, 8, 8, 2, 3, 2, 1), (1, 5, 5, 1, 1, 1, 0), (2, 9, 7, 2, 3, 1, 1)]
        {
            let x: Vec<f64> = rng.normal_vec(cin * h * w, 1.0);
            let wt: Vec<f64> = rng.normal_vec(cout * cin * k * k, 1.0);
            let (oh, ow) = conv2d_out_size(h, w, k, stride, pad);
            let mut fast = vec![0.0; cout * oh * ow];
            conv2d_fwd(&x, &wt, cin, h, w, cout, k, stride, pad, &mut fast);
            let naive = conv2d_naive(&x, &wt, cin, h, w, cout, k, stride, pad);
            for i in 0..fast.len() {
                assert!(
                    (fast[i] - naive[i]).abs() < 1e-5,
                    "conv mismatch at {i}: {} vs {}",
                    fast[i],
                    naive[i]
                );
            }
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let w = [1.0f64];
        let mut out = vec![0.0; 9];
        conv2d_fwd(&x, &w, 1, 3, 3, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv2d_averaging_kernel_constant_interior() {
        let x = vec![2.5f64; 5 * 5];
        let w = vec![1.0 / 9.0; 9];
        let mut out = vec![0.0; 5 * 5];
        conv2d_fwd(&x, &w, 1, 5, 5, 1, 3, 1, 1, &mut out);
        for y in 1..4 {
            for x_ in 1..4 {
                assert!((out[y * 5 + x_] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_sample_zero_flow_is_identity() {
        let mut rng = crate::tensor::rng::Rng::from_seed(3);
        let src: Vec<f64> = rng.normal_vec(2 * 6 * 5, 1.0);
        let flow = vec![0.0f64; 2 * 6 * 5];
        let mut out = vec![0.0f64; 2 * 6 * 5];
        grid_sample_fwd(&src, &flow, 2, 6, 5, &mut out);
        assert_eq!(src, out, "zero flow must reproduce the source bitwise");
    }

    #[test]
    fn grid_sample_integer_shift_matches_index_oracle() {
        // Constant one-pixel shift right in normalized units: flow_x = 2/(w-1).
        let (c, h, w) = (1usize, 4usize, 5usize);
        let src: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let mut flow = vec![0.0f64; 2 * h * w];
        for v in flow[..h * w].iter_mut() {
            *v = 2.0 / (w as f64 - 1.0);
        }
        let mut out = vec![0.0f64; c * h * w];
        grid_sample_fwd(&src, &flow, c, h, w, &mut out);
        for y in 0..h {
            for x in 0..w - 1 {
                assert!((out[y * w + x] - src[y * w + x + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let src: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64).collect();
        let mut out = vec![0.0; 2 * 4 * 6];
        upsample2x_fwd(&src, 2, 2, 3, &mut out);
        assert_eq!(out[0], src[0]);
        assert_eq!(out[1], src[0]);
        let mut back = vec![0.0; src.len()];
        upsample2x_bwd(&out, 2, 2, 3, &mut back);
        for (i, b) in back.iter().enumerate() {
            assert_eq!(*b, 4.0 * src[i]);
        }
    }
}
