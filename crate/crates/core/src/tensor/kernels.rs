//! Raw compute kernels over flat f64 slices.
//!
//! Everything funnels into one axpy-style GEMM whose inner loops carry no
//! floating-point reduction, so LLVM vectorizes them. Accumulation order per
//! output element is fixed and ascending in k; results are bit-reproducible.
//! Convolution is lowered to im2col + GEMM.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        let mut p = 0;
        while p + 4 <= k {
            let a0 = arow[p];
            let a1 = arow[p + 1];
            let a2 = arow[p + 2];
            let a3 = arow[p + 3];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((o, &v0), &v1), &v2), &v3) in
                orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
            p += 1;
        }
    }
}

/// dst[j,i] = src[i,j] for src of shape [rows, cols].
pub fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for (i, row) in src.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            dst[j * rows + i] = v;
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (b stored row-major as [n,k])
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; k * n];
    transpose(b, n, k, &mut bt);
    matmul_nn(a, &bt, m, k, n, out);
}

/// out[m,n] += a[k,m]^T * b[k,n]  (a stored row-major as [k,m])
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut at = vec![0.0; k * m];
    transpose(a, k, m, &mut at);
    matmul_nn(&at, b, m, k, n, out);
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Gather conv windows into a [rows, in_ch*kh*kw] matrix, zero-padded.
fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let ckk = d.patch_len();
    cols.fill(0.0);
    for b in 0..d.batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let row = ((b * d.out_h + oh) * d.out_w + ow) * ckk;
                for ci in 0..d.in_ch {
                    let xbase = (b * d.in_ch + ci) * d.h * d.w;
                    for dy in 0..d.kh {
                        let ih = (oh * d.stride + dy) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * d.w;
                        let crow = row + (ci * d.kh + dy) * d.kw;
                        let iw0 = (ow * d.stride) as isize - d.pad as isize;
                        let lo = (-iw0).max(0) as usize;
                        let hi = (d.w as isize - iw0).clamp(0, d.kw as isize) as usize;
                        for dx in lo..hi {
                            cols[crow + dx] = x[xrow + (iw0 + dx as isize) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let ckk = d.patch_len();
    for b in 0..d.batch {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let row = ((b * d.out_h + oh) * d.out_w + ow) * ckk;
                for ci in 0..d.in_ch {
                    let xbase = (b * d.in_ch + ci) * d.h * d.w;
                    for dy in 0..d.kh {
                        let ih = (oh * d.stride + dy) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * d.w;
                        let crow = row + (ci * d.kh + dy) * d.kw;
                        let iw0 = (ow * d.stride) as isize - d.pad as isize;
                        let lo = (-iw0).max(0) as usize;
                        let hi = (d.w as isize - iw0).clamp(0, d.kw as isize) as usize;
                        for dx in lo..hi {
                            x[xrow + (iw0 + dx as isize) as usize] += cols[crow + dx];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: out[b,co,oh,ow] = bias[co] + sum x*k.
pub fn conv2d_forward(x: &[f64], kern: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (rows, ckk) = (d.rows(), d.patch_len());
    let mut cols = vec![0.0; rows * ckk];
    im2col(x, d, &mut cols);
    // Kernel as [ckk, out_ch].
    let mut kt = vec![0.0; ckk * d.out_ch];
    transpose(kern, d.out_ch, ckk, &mut kt);
    let mut prod = vec![0.0; rows * d.out_ch];
    matmul_nn(&cols, &kt, rows, ckk, d.out_ch, &mut prod);
    // [rows, out_ch] -> [batch, out_ch, oh, ow]
    let plane = d.out_h * d.out_w;
    for b in 0..d.batch {
        for (r, prow) in prod[b * plane * d.out_ch..(b + 1) * plane * d.out_ch]
            .chunks_exact(d.out_ch)
            .enumerate()
        {
            let obase = b * d.out_ch * plane + r;
            for (co, &v) in prow.iter().enumerate() {
                out[obase + co * plane] = v + bias[co];
            }
        }
    }
}

/// Gradients for conv2d. Any output buffer may be empty to skip it.
pub fn conv2d_backward(
    x: &[f64],
    kern: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    grad_x: &mut [f64],
    grad_k: &mut [f64],
    grad_b: &mut [f64],
) {
    let (rows, ckk) = (d.rows(), d.patch_len());
    let plane = d.out_h * d.out_w;

    if !grad_b.is_empty() {
        for b in 0..d.batch {
            for co in 0..d.out_ch {
                let obase = (b * d.out_ch + co) * plane;
                let mut s = 0.0;
                for g in &grad_out[obase..obase + plane] {
                    s += g;
                }
                grad_b[co] += s;
            }
        }
    }
    if grad_x.is_empty() && grad_k.is_empty() {
        return;
    }

    // grad_out as [rows, out_ch].
    let mut gm = vec![0.0; rows * d.out_ch];
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let obase = (b * d.out_ch + co) * plane;
            for r in 0..plane {
                gm[(b * plane + r) * d.out_ch + co] = grad_out[obase + r];
            }
        }
    }

    if !grad_k.is_empty() {
        let mut cols = vec![0.0; rows * ckk];
        im2col(x, d, &mut cols);
        // dK^T = cols^T * gm: [ckk, out_ch]
        let mut dkt = vec![0.0; ckk * d.out_ch];
        matmul_tn(&cols, &gm, ckk, rows, d.out_ch, &mut dkt);
        for co in 0..d.out_ch {
            for p in 0..ckk {
                grad_k[co * ckk + p] += dkt[p * d.out_ch + co];
            }
        }
    }

    if !grad_x.is_empty() {
        // dcols = gm * K: [rows, ckk]
        let mut dcols = vec![0.0; rows * ckk];
        matmul_nn(&gm, kern, rows, d.out_ch, ckk, &mut dcols);
        col2im(&dcols, d, grad_x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Plain triple-loop reference, i-j-p order.
    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn transposed_kernels_agree_with_naive() {
        let mut rng = crate::rng::Rng::from_seed(3);
        for (m, k, n) in [(5, 7, 4), (3, 9, 8), (1, 4, 1), (6, 6, 6)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let want = naive(&a, &b, m, k, n);

            let mut nn = vec![0.0; m * n];
            matmul_nn(&a, &b, m, k, n, &mut nn);

            let mut bt = vec![0.0; n * k];
            transpose(&b, k, n, &mut bt);
            let mut nt = vec![0.0; m * n];
            matmul_nt(&a, &bt, m, k, n, &mut nt);

            let mut at = vec![0.0; k * m];
            transpose(&a, m, k, &mut at);
            let mut tn = vec![0.0; m * n];
            matmul_tn(&at, &b, m, k, n, &mut tn);

            for i in 0..m * n {
                assert!((nn[i] - want[i]).abs() < 1e-12);
                assert!((nt[i] - want[i]).abs() < 1e-12);
                assert!((tn[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        let mut rng = crate::rng::Rng::from_seed(12);
        for (h, w, kh, kw, stride, pad) in [(5, 5, 3, 3, 1, 0), (6, 6, 4, 4, 2, 1), (4, 6, 1, 3, 1, 1)] {
            let d = ConvDims {
                batch: 2,
                in_ch: 3,
                h,
                w,
                out_ch: 4,
                kh,
                kw,
                stride,
                pad,
                out_h: (h + 2 * pad - kh) / stride + 1,
                out_w: (w + 2 * pad - kw) / stride + 1,
            };
            let x: Vec<f64> = (0..d.batch * d.in_ch * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..d.out_ch * d.in_ch * kh * kw).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let bias: Vec<f64> = (0..d.out_ch).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let mut got = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
            conv2d_forward(&x, &k, &bias, &d, &mut got);

            for b in 0..d.batch {
                for co in 0..d.out_ch {
                    for oh in 0..d.out_h {
                        for ow in 0..d.out_w {
                            let mut s = bias[co];
                            for ci in 0..d.in_ch {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let ih = (oh * stride + dy) as isize - pad as isize;
                                        let iw = (ow * stride + dx) as isize - pad as isize;
                                        if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                            s += x[((b * d.in_ch + ci) * h + ih as usize) * w + iw as usize]
                                                * k[((co * d.in_ch + ci) * kh + dy) * kw + dx];
                                        }
                                    }
                                }
                            }
                            let got_v = got[((b * d.out_ch + co) * d.out_h + oh) * d.out_w + ow];
                            assert!((got_v - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
