//! Raw compute kernels on f32 slices. No tape logic here; `ops.rs` wires these
//! into forward/backward rules. All loops are single-threaded and accumulate in
//! a fixed order, so results are bit-reproducible across runs and thread caps.

/// C (m x n) = A (m x k) . B (k x n) with explicit strides, C overwritten.
/// Strides express transposes without copying (e.g. B^T: rsb=1, csb=n).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major matmul: C (m x n) = A (m x k) . B (k x n).
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, c);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn compute(
        n: usize,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < kh || wp < kw {
            return None;
        }
        Some(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (hp - kh) / stride + 1,
            ow: (wp - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// NHWC im2col: x (N,H,W,C) -> col ((N*OH*OW) x (kh*kw*C)), zero-padded.
/// Column order (ki, kj, c) matches conv weights stored as (kh,kw,Cin,Cout).
pub fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    debug_assert_eq!(col.len(), d.out_rows() * d.patch_len());
    let row_len = d.patch_len();
    let xw_stride = d.cin;
    let xh_stride = d.w * d.cin;
    let xn_stride = d.h * d.w * d.cin;
    let mut r = 0usize;
    for n in 0..d.n {
        let xn = n * xn_stride;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let dst = &mut col[r * row_len..(r + 1) * row_len];
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                let mut off = 0usize;
                for ki in 0..d.kh {
                    let ih = ih0 + ki as isize;
                    if ih < 0 || ih >= d.h as isize {
                        dst[off..off + d.kw * d.cin].fill(0.0);
                        off += d.kw * d.cin;
                        continue;
                    }
                    let row_base = xn + ih as usize * xh_stride;
                    for kj in 0..d.kw {
                        let iw = iw0 + kj as isize;
                        if iw < 0 || iw >= d.w as isize {
                            dst[off..off + d.cin].fill(0.0);
                        } else {
                            let src = row_base + iw as usize * xw_stride;
                            dst[off..off + d.cin].copy_from_slice(&x[src..src + d.cin]);
                        }
                        off += d.cin;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add of col gradients back to input positions (inverse of im2col).
pub fn col2im(dcol: &[f32], d: &ConvDims, dx: &mut [f32]) {
    debug_assert_eq!(dx.len(), d.n * d.h * d.w * d.cin);
    let row_len = d.patch_len();
    let xw_stride = d.cin;
    let xh_stride = d.w * d.cin;
    let xn_stride = d.h * d.w * d.cin;
    let mut r = 0usize;
    for n in 0..d.n {
        let xn = n * xn_stride;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let src = &dcol[r * row_len..(r + 1) * row_len];
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                let iw0 = (ow * d.stride) as isize - d.pad as isize;
                let mut off = 0usize;
                for ki in 0..d.kh {
                    let ih = ih0 + ki as isize;
                    if ih < 0 || ih >= d.h as isize {
                        off += d.kw * d.cin;
                        continue;
                    }
                    let row_base = xn + ih as usize * xh_stride;
                    for kj in 0..d.kw {
                        let iw = iw0 + kj as isize;
                        if iw >= 0 && iw < d.w as isize {
                            let dst = row_base + iw as usize * xw_stride;
                            for c in 0..d.cin {
                                dx[dst + c] += src[off + c];
                            }
                        }
                        off += d.cin;
                    }
                }
                r += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolDims {
    pub fn compute(n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize) -> Option<Self> {
        if k == 0 || stride == 0 || h < k || w < k {
            return None;
        }
        Some(Self {
            n,
            h,
            w,
            c,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }
}

/// NHWC average pooling, k x k window.
pub fn avgpool_forward(x: &[f32], d: &PoolDims, y: &mut [f32]) {
    let inv = 1.0 / (d.k * d.k) as f32;
    let xh = d.w * d.c;
    let xn = d.h * xh;
    let mut o = 0usize;
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                for c in 0..d.c {
                    let mut acc = 0.0f32;
                    for ki in 0..d.k {
                        let ih = oh * d.stride + ki;
                        let base = n * xn + ih * xh + ow * d.stride * d.c + c;
                        for kj in 0..d.k {
                            acc += x[base + kj * d.c];
                        }
                    }
                    y[o] = acc * inv;
                    o += 1;
                }
            }
        }
    }
}

pub fn avgpool_backward(dy: &[f32], d: &PoolDims, dx: &mut [f32]) {
    let inv = 1.0 / (d.k * d.k) as f32;
    let xh = d.w * d.c;
    let xn = d.h * xh;
    let mut o = 0usize;
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                for c in 0..d.c {
                    let g = dy[o] * inv;
                    o += 1;
                    for ki in 0..d.k {
                        let ih = oh * d.stride + ki;
                        let base = n * xn + ih * xh + ow * d.stride * d.c + c;
                        for kj in 0..d.k {
                            dx[base + kj * d.c] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch statistics over all leading dims; channel = last dim.
/// Returns (mean, biased variance).
pub fn channel_stats(x: &[f32], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / channels;
    let mut mean = vec![0.0f32; channels];
    for r in 0..rows {
        let row = &x[r * channels..(r + 1) * channels];
        for c in 0..channels {
            mean[c] += row[c];
        }
    }
    let inv_r = 1.0 / rows as f32;
    for m in mean.iter_mut() {
        *m *= inv_r;
    }
    let mut var = vec![0.0f32; channels];
    for r in 0..rows {
        let row = &x[r * channels..(r + 1) * channels];
        for c in 0..channels {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_r;
    }
    (mean, var)
}

/// Row-wise softmax over the last dim, numerically stabilized.
pub fn softmax_rows(x: &[f32], cols: usize, y: &mut [f32]) {
    let rows = x.len() / cols;
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yi = &mut y[r * cols..(r + 1) * cols];
        let mx = xi.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..cols {
            let e = (xi[c] - mx).exp();
            yi[c] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in yi.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise log-softmax over the last dim (log-sum-exp form, so a zero
/// probability never reaches log()).
pub fn log_softmax_rows(x: &[f32], cols: usize, y: &mut [f32]) {
    let rows = x.len() / cols;
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yi = &mut y[r * cols..(r + 1) * cols];
        let mx = xi.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..cols {
            sum += (xi[c] - mx).exp();
        }
        let lse = mx + sum.ln();
        for c in 0..cols {
            yi[c] = xi[c] - lse;
        }
    }
}
