//! Forward op builders. Each validates shapes, computes the value eagerly,
//! and records a backward rule when some input requires gradients (otherwise
//! a bare value node is recorded, so inference passes carry no tape weight).

use super::kernels::{self, ConvDims, PoolDims};
use super::{BnSaved, Graph, GraphError, Inner, Node, OpRecord, Var};
use crate::surrogate::{SurrogateError, SurrogateSpec};
use crate::tensor::Tensor;
use std::cell::RefMut;

/// Which statistics normalization uses for this pass.
pub enum BnStats<'a> {
    /// Mean/variance computed from the current batch (training/calibration).
    Batch,
    /// Fixed statistics (running averages) supplied by the caller.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

fn mismatch(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

impl Graph {
    fn guard(&self) -> Result<RefMut<'_, Inner>, GraphError> {
        let inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(GraphError::TapeConsumed);
        }
        Ok(inner)
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        rec: impl FnOnce(Var, Var) -> OpRecord,
    ) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let (sa, sb) = (inner.nodes[a.0].value.shape(), inner.nodes[b.0].value.shape());
        if sa != sb {
            return Err(mismatch(name, format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let data: Vec<f32> = inner.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(inner.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = inner.nodes[a.0].rg || inner.nodes[b.0].rg;
        let op = if rg { rec(a, b) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("shape derived from data"),
            rg,
            op,
        }))
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f32) -> f32,
        rec: impl FnOnce(Var) -> OpRecord,
    ) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let value = inner.nodes[a.0].value.map(&f);
        let rg = inner.nodes[a.0].rg;
        let op = if rg { rec(a) } else { OpRecord::Leaf };
        Ok(inner.push(Node { value, rg, op }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, OpRecord::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, OpRecord::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, OpRecord::Mul)
    }

    pub fn neg(&self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, |x| -x, OpRecord::Neg)
    }

    pub fn add_scalar(&self, a: Var, c: f32) -> Result<Var, GraphError> {
        self.unary(a, |x| x + c, OpRecord::AddScalar)
    }

    pub fn mul_scalar(&self, a: Var, c: f32) -> Result<Var, GraphError> {
        self.unary(a, |x| x * c, move |v| OpRecord::MulScalar(v, c))
    }

    pub fn relu(&self, a: Var) -> Result<Var, GraphError> {
        // Derivative at exactly 0 is taken as 0 (mask is x > 0).
        self.unary(a, |x| x.max(0.0), OpRecord::Relu)
    }

    pub fn exp(&self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, f32::exp, OpRecord::Exp)
    }

    pub fn log(&self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, f32::ln, OpRecord::Log)
    }

    /// x (.., C) + bias (C), broadcast over all leading dims.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let cols = *inner.nodes[x.0]
            .value
            .shape()
            .last()
            .ok_or_else(|| mismatch("add_bias", "rank-0 input".into()))?;
        if inner.nodes[b.0].value.numel() != cols {
            return Err(mismatch(
                "add_bias",
                format!(
                    "bias len {} vs last dim {}",
                    inner.nodes[b.0].value.numel(),
                    cols
                ),
            ));
        }
        let bias = inner.nodes[b.0].value.data().to_vec();
        let shape = inner.nodes[x.0].value.shape().to_vec();
        let data: Vec<f32> = inner.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % cols])
            .collect();
        let rg = inner.nodes[x.0].rg || inner.nodes[b.0].rg;
        let op = if rg { OpRecord::AddBias(x, b) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("shape preserved"),
            rg,
            op,
        }))
    }

    fn bcast_scalar(
        &self,
        name: &'static str,
        x: Var,
        s: Var,
        f: impl Fn(f32, f32) -> f32,
        rec: impl FnOnce(Var, Var) -> OpRecord,
    ) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        if inner.nodes[s.0].value.numel() != 1 {
            return Err(mismatch(
                name,
                format!("broadcast operand has {} elements, expected 1", inner.nodes[s.0].value.numel()),
            ));
        }
        let sv = inner.nodes[s.0].value.data()[0];
        let value = inner.nodes[x.0].value.map(|v| f(v, sv));
        let rg = inner.nodes[x.0].rg || inner.nodes[s.0].rg;
        let op = if rg { rec(x, s) } else { OpRecord::Leaf };
        Ok(inner.push(Node { value, rg, op }))
    }

    /// x - s with s a 1-element tensor broadcast over x (threshold subtraction).
    pub fn sub_bcast_scalar(&self, x: Var, s: Var) -> Result<Var, GraphError> {
        self.bcast_scalar("sub_bcast_scalar", x, s, |a, b| a - b, OpRecord::SubBcastScalar)
    }

    /// x * s with s a 1-element tensor broadcast over x.
    pub fn mul_bcast_scalar(&self, x: Var, s: Var) -> Result<Var, GraphError> {
        self.bcast_scalar("mul_bcast_scalar", x, s, |a, b| a * b, OpRecord::MulBcastScalar)
    }

    /// (m,k) . (k,n) -> (m,n).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let sa = inner.nodes[a.0].value.shape().to_vec();
        let sb = inner.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} . {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0f32; m * n];
        kernels::matmul(
            m,
            k,
            n,
            inner.nodes[a.0].value.data(),
            inner.nodes[b.0].value.data(),
            &mut data,
        );
        let rg = inner.nodes[a.0].rg || inner.nodes[b.0].rg;
        let op = if rg { OpRecord::Matmul(a, b) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(vec![m, n], data).expect("m*n elements"),
            rg,
            op,
        }))
    }

    /// NHWC convolution: x (N,H,W,Cin), w (kh,kw,Cin,Cout), zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let sx = inner.nodes[x.0].value.shape().to_vec();
        let sw = inner.nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(mismatch(
                "conv2d",
                format!("input {sx:?} (NHWC) vs weight {sw:?} (kh,kw,Cin,Cout)"),
            ));
        }
        let dims = ConvDims::compute(sx[0], sx[1], sx[2], sx[3], sw[0], sw[1], sw[3], stride, pad)
            .ok_or_else(|| {
                mismatch(
                    "conv2d",
                    format!("kernel {}x{} stride {stride} pad {pad} does not fit {sx:?}", sw[0], sw[1]),
                )
            })?;
        let mut col = vec![0.0f32; dims.out_rows() * dims.patch_len()];
        kernels::im2col(inner.nodes[x.0].value.data(), &dims, &mut col);
        let mut data = vec![0.0f32; dims.out_rows() * dims.cout];
        kernels::matmul(
            dims.out_rows(),
            dims.patch_len(),
            dims.cout,
            &col,
            inner.nodes[w.0].value.data(),
            &mut data,
        );
        let rg = inner.nodes[x.0].rg || inner.nodes[w.0].rg;
        let op = if rg {
            OpRecord::Conv2d {
                x,
                w,
                dims,
                col: if inner.nodes[w.0].rg { Some(col) } else { None },
            }
        } else {
            OpRecord::Leaf
        };
        Ok(inner.push(Node {
            value: Tensor::new(vec![dims.n, dims.oh, dims.ow, dims.cout], data)
                .expect("conv output shape"),
            rg,
            op,
        }))
    }

    pub fn softmax_last(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let shape = inner.nodes[x.0].value.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| mismatch("softmax", "rank-0 input".into()))?;
        let mut data = vec![0.0f32; inner.nodes[x.0].value.numel()];
        kernels::softmax_rows(inner.nodes[x.0].value.data(), cols, &mut data);
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::SoftmaxLast(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("shape preserved"),
            rg,
            op,
        }))
    }

    pub fn log_softmax_last(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let shape = inner.nodes[x.0].value.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| mismatch("log_softmax", "rank-0 input".into()))?;
        let mut data = vec![0.0f32; inner.nodes[x.0].value.numel()];
        kernels::log_softmax_rows(inner.nodes[x.0].value.data(), cols, &mut data);
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::LogSoftmaxLast(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("shape preserved"),
            rg,
            op,
        }))
    }

    pub fn sum(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let total: f32 = inner.nodes[x.0].value.data().iter().sum();
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::Sum(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::scalar(total),
            rg,
            op,
        }))
    }

    pub fn mean(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let n = inner.nodes[x.0].value.numel();
        if n == 0 {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let total: f32 = inner.nodes[x.0].value.data().iter().sum();
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::Mean(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::scalar(total / n as f32),
            rg,
            op,
        }))
    }

    /// Row-wise sum over the last dim: (.., C) -> (..).
    pub fn sum_last(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let shape = inner.nodes[x.0].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(mismatch("sum_last", format!("needs rank >= 2, got {shape:?}")));
        }
        let cols = *shape.last().expect("rank >= 2");
        let rows = inner.nodes[x.0].value.numel() / cols;
        let xd = inner.nodes[x.0].value.data();
        let data: Vec<f32> = (0..rows)
            .map(|r| xd[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::SumLast(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape[..shape.len() - 1].to_vec(), data).expect("rows elements"),
            rg,
            op,
        }))
    }

    /// Row-wise max over the last dim; gradient routes to the first argmax.
    pub fn max_last(&self, x: Var) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let shape = inner.nodes[x.0].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(mismatch("max_last", format!("needs rank >= 2, got {shape:?}")));
        }
        let cols = *shape.last().expect("rank >= 2");
        let rows = inner.nodes[x.0].value.numel() / cols;
        let xd = inner.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            data.push(row[best]);
            argmax.push(best);
        }
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::MaxLast { x, argmax } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape[..shape.len() - 1].to_vec(), data).expect("rows elements"),
            rg,
            op,
        }))
    }

    /// NHWC average pooling with a k x k window.
    pub fn avgpool(&self, x: Var, k: usize, stride: usize) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let s = inner.nodes[x.0].value.shape().to_vec();
        if s.len() != 4 {
            return Err(mismatch("avgpool", format!("needs NHWC, got {s:?}")));
        }
        let dims = PoolDims::compute(s[0], s[1], s[2], s[3], k, stride)
            .ok_or_else(|| mismatch("avgpool", format!("window {k} stride {stride} vs {s:?}")))?;
        let mut data = vec![0.0f32; dims.n * dims.oh * dims.ow * dims.c];
        kernels::avgpool_forward(inner.nodes[x.0].value.data(), &dims, &mut data);
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::AvgPool { x, dims } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(vec![dims.n, dims.oh, dims.ow, dims.c], data)
                .expect("pool output shape"),
            rg,
            op,
        }))
    }

    /// Zero-pads the two spatial dims of an NHWC tensor by `pad` on each side.
    pub fn pad2d(&self, x: Var, pad: usize) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let s = inner.nodes[x.0].value.shape().to_vec();
        if s.len() != 4 {
            return Err(mismatch("pad2d", format!("needs NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![0.0f32; n * hp * wp * c];
        let xd = inner.nodes[x.0].value.data();
        for ni in 0..n {
            for hi in 0..h {
                let src = (ni * h + hi) * w * c;
                let dst = ((ni * hp + hi + pad) * wp + pad) * c;
                data[dst..dst + w * c].copy_from_slice(&xd[src..src + w * c]);
            }
        }
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::Pad2d { x, pad } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(vec![n, hp, wp, c], data).expect("padded shape"),
            rg,
            op,
        }))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let n: usize = shape.iter().product();
        if n != inner.nodes[x.0].value.numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", inner.nodes[x.0].value.shape()),
            ));
        }
        let value = inner.nodes[x.0]
            .value
            .clone()
            .reshape(shape)
            .expect("element count checked");
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::Reshape(x) } else { OpRecord::Leaf };
        Ok(inner.push(Node { value, rg, op }))
    }

    /// Stacks parts along the first dim; trailing dims must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no inputs".into()));
        }
        let first = inner.nodes[parts[0].0].value.shape().to_vec();
        let mut rows = 0usize;
        for p in parts {
            let s = inner.nodes[p.0].value.shape();
            if s[1..] != first[1..] {
                return Err(mismatch(
                    "concat_rows",
                    format!("trailing dims differ: {first:?} vs {s:?}"),
                ));
            }
            rows += s[0];
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(inner.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|p| inner.nodes[p.0].rg);
        let op = if rg { OpRecord::ConcatRows(parts.to_vec()) } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("concat shape"),
            rg,
            op,
        }))
    }

    /// Copies `len` leading-dim rows starting at `start`.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let s = inner.nodes[x.0].value.shape().to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(mismatch(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let row = inner.nodes[x.0].value.numel() / s[0];
        let data = inner.nodes[x.0].value.data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::SliceRows { x, start, len } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("slice shape"),
            rg,
            op,
        }))
    }

    /// (T*B, rest) -> (B, rest), summing the T leading blocks (readout
    /// accumulation over timesteps).
    pub fn sum_time_blocks(&self, x: Var, t: usize) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        let s = inner.nodes[x.0].value.shape().to_vec();
        if s.is_empty() || t == 0 || s[0] % t != 0 {
            return Err(mismatch(
                "sum_time_blocks",
                format!("first dim {} not divisible into {t} blocks", s.first().copied().unwrap_or(0)),
            ));
        }
        let block = inner.nodes[x.0].value.numel() / t;
        let xd = inner.nodes[x.0].value.data();
        let mut data = vec![0.0f32; block];
        for ti in 0..t {
            let src = &xd[ti * block..(ti + 1) * block];
            for i in 0..block {
                data[i] += src[i];
            }
        }
        let mut shape = s.clone();
        shape[0] /= t;
        let rg = inner.nodes[x.0].rg;
        let op = if rg { OpRecord::SumTimeBlocks { x, t } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: Tensor::new(shape, data).expect("block shape"),
            rg,
            op,
        }))
    }

    /// Heaviside step on z (H(0) = 1), with the given pointwise surrogate as
    /// the backward rule. Structural modes are rejected here; they never go
    /// through per-step spike nodes.
    pub fn spike(&self, z: Var, spec: SurrogateSpec) -> Result<Var, GraphError> {
        if !spec.is_pointwise() {
            return Err(GraphError::Surrogate(SurrogateError::NotPointwise(spec.kind)));
        }
        let mut inner = self.guard()?;
        let value = inner.nodes[z.0].value.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        let rg = inner.nodes[z.0].rg;
        let op = if rg { OpRecord::Spike { z, spec } } else { OpRecord::Leaf };
        Ok(inner.push(Node { value, rg, op }))
    }

    /// Rate-level straight-through node: the forward value is `rates`
    /// (recorded from a spiking pass), the backward multiplies the upstream
    /// gradient by 1[rate > 0] and otherwise passes it straight through to z.
    pub fn rate_ste(&self, z: Var, rates: Tensor) -> Result<Var, GraphError> {
        let mut inner = self.guard()?;
        if inner.nodes[z.0].value.shape() != rates.shape() {
            return Err(mismatch(
                "rate_ste",
                format!(
                    "pre-activation {:?} vs rates {:?}",
                    inner.nodes[z.0].value.shape(),
                    rates.shape()
                ),
            ));
        }
        let mask: Vec<f32> = rates
            .data()
            .iter()
            .map(|&r| if r > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let rg = inner.nodes[z.0].rg;
        let op = if rg { OpRecord::RateSte { z, mask } } else { OpRecord::Leaf };
        Ok(inner.push(Node {
            value: rates,
            rg,
            op,
        }))
    }

    /// Channel-wise normalization over all leading dims (channel = last dim):
    /// y = gamma * (x - mean) / sqrt(var + eps) + beta.
    ///
    /// With `BnStats::Batch` the statistics come from x itself and are
    /// returned so the caller can fold them into running averages; with
    /// `BnStats::Fixed` the supplied statistics are treated as constants.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f32,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>), GraphError> {
        let mut inner = self.guard()?;
        let shape = inner.nodes[x.0].value.shape().to_vec();
        let channels = *shape
            .last()
            .ok_or_else(|| mismatch("batch_norm", "rank-0 input".into()))?;
        if inner.nodes[gamma.0].value.numel() != channels
            || inner.nodes[beta.0].value.numel() != channels
        {
            return Err(mismatch(
                "batch_norm",
                format!(
                    "gamma/beta ({}, {}) vs {channels} channels",
                    inner.nodes[gamma.0].value.numel(),
                    inner.nodes[beta.0].value.numel()
                ),
            ));
        }
        let rows = inner.nodes[x.0].value.numel() / channels;
        if rows < 2 && matches!(stats, BnStats::Batch) {
            return Err(mismatch(
                "batch_norm",
                format!("batch statistics need >= 2 rows, got {rows}"),
            ));
        }
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let (m, v) = kernels::channel_stats(inner.nodes[x.0].value.data(), channels);
                (m, v, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(mismatch(
                        "batch_norm",
                        format!("fixed stats ({}, {}) vs {channels} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = inner.nodes[x.0].value.data();
        let gd = inner.nodes[gamma.0].value.data().to_vec();
        let bd = inner.nodes[beta.0].value.data().to_vec();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut data = vec![0.0f32; xd.len()];
        for r in 0..rows {
            let xs = &xd[r * channels..(r + 1) * channels];
            let xh = &mut xhat[r * channels..(r + 1) * channels];
            let ys = &mut data[r * channels..(r + 1) * channels];
            for c in 0..channels {
                let h = (xs[c] - mean[c]) * inv_std[c];
                xh[c] = h;
                ys[c] = gd[c] * h + bd[c];
            }
        }
        let rg = inner.nodes[x.0].rg || inner.nodes[gamma.0].rg || inner.nodes[beta.0].rg;
        let op = if rg {
            OpRecord::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            }
        } else {
            OpRecord::Leaf
        };
        let out = inner.push(Node {
            value: Tensor::new(shape, data).expect("shape preserved"),
            rg,
            op,
        });
        Ok((out, batch_stats.then_some((mean, var))))
    }
}
