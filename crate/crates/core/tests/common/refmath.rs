//! Naive f64 reference semantics for every differentiable op. Deliberately
//! written as direct loops with no code shared with the engine under test.
//! Layouts match the engine's conventions: activations NHWC, conv weights
//! (kh,kw,Cin,Cout), dense weights (in,out), channel = last dim.

#![allow(clippy::too_many_arguments)]

pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..n {
                c[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    c
}

pub fn conv2d(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * oh * ow * cout];
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ih = (oi * stride + ki) as isize - pad as isize;
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((ni * h + ih as usize) * w + iw as usize) * cin + ci];
                                let wv = wgt[((ki * kw + kj) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((ni * oh + oi) * ow + oj) * cout + co] = acc;
                }
            }
        }
    }
    y
}

pub fn avgpool(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = vec![0.0; n * oh * ow * c];
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += x[((ni * h + oi * stride + ki) * w + oj * stride + kj) * c + ci];
                        }
                    }
                    y[((ni * oh + oi) * ow + oj) * c + ci] = acc / (k * k) as f64;
                }
            }
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - mx).exp();
            y[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            y[r * cols + c] /= sum;
        }
    }
    y
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let p = softmax_rows(x, cols);
    p.iter().map(|&v| v.ln()).collect()
}

/// Batch-statistics normalization over rows, channel = last dim, biased var.
pub fn batchnorm_batch(x: &[f64], channels: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / channels;
    let mut mean = vec![0.0; channels];
    for r in 0..rows {
        for c in 0..channels {
            mean[c] += x[r * channels + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; channels];
    for r in 0..rows {
        for c in 0..channels {
            let d = x[r * channels + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..channels {
            let xh = (x[r * channels + c] - mean[c]) / (var[c] + eps).sqrt();
            y[r * channels + c] = gamma[c] * xh + beta[c];
        }
    }
    y
}

pub fn batchnorm_fixed(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let rows = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..channels {
            let xh = (x[r * channels + c] - mean[c]) / (var[c] + eps).sqrt();
            y[r * channels + c] = gamma[c] * xh + beta[c];
        }
    }
    y
}

/// Mean over the batch of -log p[label] given logits (log-sum-exp form).
pub fn cross_entropy_logits(logits: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let ls = log_softmax_rows(logits, cols);
    let mut acc = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        acc -= ls[r * cols + y];
    }
    acc / labels.len() as f64
}

/// Mean over the batch of KL(softmax(adv) || softmax(clean)).
pub fn kl_logits(adv: &[f64], clean: &[f64], cols: usize) -> f64 {
    let la = log_softmax_rows(adv, cols);
    let lc = log_softmax_rows(clean, cols);
    let rows = adv.len() / cols;
    let mut acc = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let pa = la[r * cols + c].exp();
            acc += pa * (la[r * cols + c] - lc[r * cols + c]);
        }
    }
    acc / rows as f64
}
