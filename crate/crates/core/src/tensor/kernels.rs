//! Hot numeric kernels shared by forward and backward passes.
//!
//! Inner loops run over contiguous slices so the compiler can vectorize them.

/// c[m,n] += a[m,k] * b[k,n], row-major, ikj order (AXPY on rows of b).
pub fn matmul_raw(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
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

/// out[j,i] = a[i,j] for an r x c row-major matrix.
pub fn transpose_raw(a: &[f64], out: &mut [f64], r: usize, c: usize) {
    debug_assert_eq!(a.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

/// Spatial output length for kernel k, stride s, pad (k-1)/2.
pub fn conv_out_len(len: usize, k: usize, s: usize) -> usize {
    let p = (k - 1) / 2;
    (len + 2 * p - k) / s + 1
}

/// 2-D convolution: x is (ci,h,w), w is (co,ci,k,k), b is (co), out is (co,ho,wo).
/// Zero padding of (k-1)/2 on each side.
/// Lowers the padded, strided input into a [ci*k*k, ho*wo] patch matrix
/// whose row order matches the weight layout, so conv becomes one matmul.
fn im2col(x: &[f64], col: &mut [f64], ci: usize, h: usize, w: usize, k: usize, s: usize) {
    let p = (k - 1) as isize / 2;
    let ho = conv_out_len(h, k, s);
    let wo = conv_out_len(w, k, s);
    let npos = ho * wo;
    for ic in 0..ci {
        let xbase = ic * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ic * k + ky) * k + kx) * npos..][..npos];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                if w as isize - 1 - dx < 0 {
                    continue;
                }
                let ox0 = if dx < 0 { (-dx as usize).div_ceil(s) } else { 0 };
                let ox1 = (((w as isize - 1 - dx) / s as isize) + 1).min(wo as isize) as usize;
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * s) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut xi = (xbase as isize + iy * w as isize + (ox0 * s) as isize + dx)
                        as usize;
                    for slot in &mut row[oy * wo + ox0..oy * wo + ox1] {
                        *slot = x[xi];
                        xi += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_raw(
    x: &[f64],
    wt: &[f64],
    b: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    s: usize,
) {
    let p = (k - 1) as isize / 2;
    let ho = conv_out_len(h, k, s);
    let wo = conv_out_len(w, k, s);
    debug_assert_eq!(out.len(), co * ho * wo);
    if k == 1 && s == 1 {
        // pointwise conv is a plain channel-mixing matmul
        let npos = h * w;
        for oc in 0..co {
            out[oc * npos..(oc + 1) * npos].fill(b[oc]);
        }
        matmul_raw(wt, x, out, co, ci, npos);
        return;
    }
    if s != 1 {
        // strided case: patch-matrix lowering keeps every inner loop
        // contiguous; the summation order matches the direct path
        let nk = ci * k * k;
        let npos = ho * wo;
        let mut col = vec![0.0; nk * npos];
        im2col(x, &mut col, ci, h, w, k, s);
        for oc in 0..co {
            out[oc * npos..(oc + 1) * npos].fill(b[oc]);
        }
        matmul_raw(wt, &col, out, co, nk, npos);
        return;
    }
    for oc in 0..co {
        let obase = oc * ho * wo;
        out[obase..obase + ho * wo].fill(b[oc]);
        for ic in 0..ci {
            let xbase = ic * h * w;
            let wbase = (oc * ci + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[oy,ox] += wv * x[oy+ky-p, ox+kx-p], contiguous AXPY per row
                    let dx = kx as isize - p;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = (w as isize - dx).min(wo as isize).max(0) as usize;
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let orow = obase + oy * wo;
                        let xs = &x[(xrow as isize + ox0 as isize + dx) as usize
                            ..(xrow as isize + ox1 as isize + dx) as usize];
                        let os = &mut out[orow + ox0..orow + ox1];
                        for (ov, &xv) in os.iter_mut().zip(xs) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d_raw` with respect to input, weight, and bias.
/// `g` is the output gradient (co,ho,wo); gx/gw/gb are accumulated into.
/// `want_gx` / `want_gw` let callers skip pieces that feed constants.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_raw(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    s: usize,
    want_gx: bool,
    want_gw: bool,
) {
    let p = (k - 1) as isize / 2;
    let ho = conv_out_len(h, k, s);
    let wo = conv_out_len(w, k, s);
    let npos = ho * wo;
    for oc in 0..co {
        gb[oc] += g[oc * npos..(oc + 1) * npos].iter().sum::<f64>();
    }
    if !want_gx && !want_gw {
        return;
    }
    if k == 1 && s == 1 {
        if want_gw {
            let mut xt = vec![0.0; ci * npos];
            transpose_raw(x, &mut xt, ci, npos);
            matmul_raw(g, &xt, gw, co, npos, ci);
        }
        if want_gx {
            let mut wtt = vec![0.0; ci * co];
            transpose_raw(wt, &mut wtt, co, ci);
            matmul_raw(&wtt, g, gx, ci, co, npos);
        }
        return;
    }
    if s != 1 {
        // strided case via the same patch-matrix lowering as the forward:
        //   gw += g . col^T        gcol = wt^T . g, scattered back onto gx
        let nk = ci * k * k;
        if want_gw {
            let mut col = vec![0.0; nk * npos];
            im2col(x, &mut col, ci, h, w, k, s);
            let mut colt = vec![0.0; npos * nk];
            transpose_raw(&col, &mut colt, nk, npos);
            matmul_raw(g, &colt, gw, co, npos, nk);
        }
        if !want_gx {
            return;
        }
        let mut wtt = vec![0.0; nk * co];
        transpose_raw(wt, &mut wtt, co, nk);
        let mut gcol = vec![0.0; nk * npos];
        matmul_raw(&wtt, g, &mut gcol, nk, co, npos);
        for ic in 0..ci {
            let xbase = ic * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = &gcol[((ic * k + ky) * k + kx) * npos..][..npos];
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    if w as isize - 1 - dx < 0 {
                        continue;
                    }
                    let ox0 = if dx < 0 { (-dx as usize).div_ceil(s) } else { 0 };
                    let ox1 = (((w as isize - 1 - dx) / s as isize) + 1).min(wo as isize) as usize;
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let mut xi = (xbase as isize + iy * w as isize + (ox0 * s) as isize + dx)
                            as usize;
                        for &gv in &row[oy * wo + ox0..oy * wo + ox1] {
                            gx[xi] += gv;
                            xi += s;
                        }
                    }
                }
            }
        }
        return;
    }
    for oc in 0..co {
        let obase = oc * ho * wo;
        for ic in 0..ci {
            let xbase = ic * h * w;
            let wbase = (oc * ci + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[wbase + ky * k + kx];
                    let dx = kx as isize - p;
                    let ox0 = (-dx).max(0) as usize;
                    let ox1 = (w as isize - dx).min(wo as isize).max(0) as usize;
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut wg = 0.0;
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let orow = obase + oy * wo;
                        let lo = (xrow as isize + ox0 as isize + dx) as usize;
                        let hi = (xrow as isize + ox1 as isize + dx) as usize;
                        let gs = &g[orow + ox0..orow + ox1];
                        match (want_gx, want_gw) {
                            (true, true) => {
                                for ((xv, gxv), &gv) in
                                    x[lo..hi].iter().zip(gx[lo..hi].iter_mut()).zip(gs)
                                {
                                    wg += gv * xv;
                                    *gxv += gv * wv;
                                }
                            }
                            (true, false) => {
                                for (gxv, &gv) in gx[lo..hi].iter_mut().zip(gs) {
                                    *gxv += gv * wv;
                                }
                            }
                            (false, true) => {
                                for (&xv, &gv) in x[lo..hi].iter().zip(gs) {
                                    wg += gv * xv;
                                }
                            }
                            (false, false) => unreachable!(),
                        }
                    }
                    gw[wbase + ky * k + kx] += wg;
                }
            }
        }
    }
}
