//! Minimal reverse-mode automatic differentiation on a per-pass tape.
//!
//! Every forward op executes eagerly and appends one node to the tape. The
//! backward record (parents + saved buffers) is kept only when some input
//! requires gradients, so pure-inference passes pay for values alone.
//! `backward()` seeds a scalar loss with 1, sweeps the tape once in reverse
//! creation order (which is a reverse topological order, since ops only ever
//! reference earlier nodes), accumulates parent gradients additively, frees
//! each intermediate gradient as soon as its node has been processed, and
//! consumes the tape: recording or differentiating after that is an error.
//!
//! Concurrency model: a `Graph` is confined to one pass on one thread; model
//! weights live outside as plain tensors and are re-leafed per pass, so any
//! number of passes can run concurrently on disjoint graphs.

pub mod kernels;
mod ops;

pub use ops::BnStats;

use crate::surrogate::{SurrogateError, SurrogateSpec};
use crate::tensor::Tensor;
use kernels::{ConvDims, PoolDims};
use std::cell::RefCell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tape already consumed by backward()")]
    TapeConsumed,
    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Handle to a tensor on a graph's tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) struct BnSaved {
    /// Normalized activations, kept for d/dgamma and the batch-stats dx path.
    pub xhat: Vec<f32>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Vec<f32>,
    /// True when normalization used current-batch statistics (training or
    /// calibration mode); false for fixed running statistics.
    pub batch_stats: bool,
}

#[derive(Debug)]
pub(crate) enum OpRecord {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    /// x (.., C) + bias (C), broadcast over leading dims.
    AddBias(Var, Var),
    /// x - s with s a 1-element var broadcast over all of x.
    SubBcastScalar(Var, Var),
    /// x * s with s a 1-element var broadcast over all of x.
    MulBcastScalar(Var, Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
        /// im2col buffer, kept only when the weight needs gradients.
        col: Option<Vec<f32>>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        dims: PoolDims,
    },
    Pad2d {
        x: Var,
        pad: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    /// (T*B, rest) -> (B, rest): sum over the T leading blocks.
    SumTimeBlocks {
        x: Var,
        t: usize,
    },
    /// Heaviside forward (H(0)=1), pointwise surrogate backward.
    Spike {
        z: Var,
        spec: SurrogateSpec,
    },
    /// Rate-level straight-through: forward value is the recorded firing rate,
    /// backward passes upstream gradient through `mask` (1 where rate > 0).
    RateSte {
        z: Var,
        mask: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub rg: bool,
    pub op: OpRecord,
}

pub(crate) struct Inner {
    pub nodes: Vec<Node>,
    pub consumed: bool,
}

/// One forward/backward pass's tape.
pub struct Graph {
    pub(crate) inner: RefCell<Inner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Puts a tensor on the tape. With `requires_grad`, `backward()` will
    /// produce a gradient for it; otherwise it never allocates one.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.push(Node {
            value,
            rg: requires_grad,
            op: OpRecord::Leaf,
        })
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn value_clone(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].rg
    }

    /// Number of nodes currently recorded (diagnostics/tests).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: all backward
    /// buffers are freed and the graph refuses further recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(GraphError::TapeConsumed);
        }
        if inner.nodes[loss.0].value.numel() != 1 {
            return Err(GraphError::NonScalarLoss(
                inner.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        inner.consumed = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        if inner.nodes[loss.0].rg {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            // Skip nodes that received no gradient or don't require one.
            if grads[id].is_none() || !inner.nodes[id].rg {
                continue;
            }
            if matches!(inner.nodes[id].op, OpRecord::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            inner.backprop_node(id, &g, &mut grads);
        }
        // Keep leaf gradients; everything else was already dropped in the sweep.
        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for id in 0..n {
            if let Some(g) = grads[id].take() {
                if matches!(inner.nodes[id].op, OpRecord::Leaf) {
                    let shape = inner.nodes[id].value.shape().to_vec();
                    out[id] = Some(Tensor::new(shape, g).expect("grad matches value shape"));
                }
            }
        }
        // Free backward records eagerly; values stay readable.
        for node in inner.nodes.iter_mut() {
            node.op = OpRecord::Leaf;
        }
        Ok(Gradients { slots: out })
    }
}

impl Inner {
    pub(crate) fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f32>>],
        v: Var,
        len: usize,
        fill: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[v.0].rg {
            return;
        }
        let mut buf = vec![0.0f32; len];
        fill(&mut buf);
        Self::accumulate(grads, v, buf);
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Computes parent gradient contributions for one node.
    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            OpRecord::Leaf => {}
            OpRecord::Add(a, b) => {
                self.accumulate_with(grads, *a, g.len(), |buf| buf.copy_from_slice(g));
                self.accumulate_with(grads, *b, g.len(), |buf| buf.copy_from_slice(g));
            }
            OpRecord::Sub(a, b) => {
                self.accumulate_with(grads, *a, g.len(), |buf| buf.copy_from_slice(g));
                self.accumulate_with(grads, *b, g.len(), |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o = -gi;
                    }
                });
            }
            OpRecord::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate_with(grads, *a, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = g[i] * vb[i];
                    }
                });
                self.accumulate_with(grads, *b, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = g[i] * va[i];
                    }
                });
            }
            OpRecord::Neg(a) => {
                self.accumulate_with(grads, *a, g.len(), |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o = -gi;
                    }
                });
            }
            OpRecord::AddScalar(a) => {
                self.accumulate_with(grads, *a, g.len(), |buf| buf.copy_from_slice(g));
            }
            OpRecord::MulScalar(a, c) => {
                let c = *c;
                self.accumulate_with(grads, *a, g.len(), |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o = c * gi;
                    }
                });
            }
            OpRecord::AddBias(x, b) => {
                self.accumulate_with(grads, *x, g.len(), |buf| buf.copy_from_slice(g));
                let cols = self.val(*b).numel();
                self.accumulate_with(grads, *b, cols, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % cols] += gi;
                    }
                });
            }
            OpRecord::SubBcastScalar(x, s) => {
                self.accumulate_with(grads, *x, g.len(), |buf| buf.copy_from_slice(g));
                self.accumulate_with(grads, *s, 1, |buf| {
                    buf[0] = -g.iter().sum::<f32>();
                });
            }
            OpRecord::MulBcastScalar(x, s) => {
                let sv = self.val(*s).data()[0];
                let vx = self.val(*x).data();
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] = gi * sv;
                    }
                });
                self.accumulate_with(grads, *s, 1, |buf| {
                    buf[0] = g.iter().zip(vx).map(|(gi, xi)| gi * xi).sum();
                });
            }
            OpRecord::Matmul(a, b) => {
                let (sa, sb) = (self.val(*a).shape().to_vec(), self.val(*b).shape().to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let vb = self.val(*b).data();
                let va = self.val(*a).data();
                // dA = g . B^T
                self.accumulate_with(grads, *a, m * k, |buf| {
                    kernels::gemm(m, n, k, g, n as isize, 1, vb, 1, n as isize, buf);
                });
                // dB = A^T . g
                self.accumulate_with(grads, *b, k * n, |buf| {
                    kernels::gemm(k, m, n, va, 1, k as isize, g, n as isize, 1, buf);
                });
            }
            OpRecord::Conv2d { x, w, dims, col } => {
                let d = *dims;
                let kk = d.patch_len();
                let m = d.out_rows();
                let vw = self.val(*w).data();
                if self.nodes[x.0].rg {
                    // dcol = g (M x Cout) . W^T (Cout x K), then scatter back.
                    let mut dcol = vec![0.0f32; m * kk];
                    kernels::gemm(m, d.cout, kk, g, d.cout as isize, 1, vw, 1, d.cout as isize, &mut dcol);
                    self.accumulate_with(grads, *x, d.n * d.h * d.w * d.cin, |buf| {
                        kernels::col2im(&dcol, &d, buf);
                    });
                }
                if self.nodes[w.0].rg {
                    let col = col.as_ref().expect("col saved when weight needs grads");
                    // dW = col^T (K x M) . g (M x Cout)
                    self.accumulate_with(grads, *w, kk * d.cout, |buf| {
                        kernels::gemm(kk, m, d.cout, col, 1, kk as isize, g, d.cout as isize, 1, buf);
                    });
                }
            }
            OpRecord::Relu(x) => {
                let vx = self.val(*x).data();
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = if vx[i] > 0.0 { g[i] } else { 0.0 };
                    }
                });
            }
            OpRecord::Exp(x) => {
                let vy = self.val(Var(id)).data();
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = g[i] * vy[i];
                    }
                });
            }
            OpRecord::Log(x) => {
                let vx = self.val(*x).data();
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = g[i] / vx[i];
                    }
                });
            }
            OpRecord::SoftmaxLast(x) => {
                let p = self.val(Var(id)).data();
                let cols = *self.val(Var(id)).shape().last().expect("non-empty shape");
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for r in 0..g.len() / cols {
                        let (gs, ps) = (&g[r * cols..(r + 1) * cols], &p[r * cols..(r + 1) * cols]);
                        let dot: f32 = gs.iter().zip(ps).map(|(gi, pi)| gi * pi).sum();
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = ps[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            OpRecord::LogSoftmaxLast(x) => {
                let ls = self.val(Var(id)).data();
                let cols = *self.val(Var(id)).shape().last().expect("non-empty shape");
                self.accumulate_with(grads, *x, g.len(), |buf| {
                    for r in 0..g.len() / cols {
                        let gs = &g[r * cols..(r + 1) * cols];
                        let lss = &ls[r * cols..(r + 1) * cols];
                        let gsum: f32 = gs.iter().sum();
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = gs[c] - lss[c].exp() * gsum;
                        }
                    }
                });
            }
            OpRecord::Sum(x) => {
                let n = self.val(*x).numel();
                self.accumulate_with(grads, *x, n, |buf| buf.fill(g[0]));
            }
            OpRecord::Mean(x) => {
                let n = self.val(*x).numel();
                let gv = g[0] / n as f32;
                self.accumulate_with(grads, *x, n, |buf| buf.fill(gv));
            }
            OpRecord::SumLast(x) => {
                let n = self.val(*x).numel();
                let cols = n / g.len();
                self.accumulate_with(grads, *x, n, |buf| {
                    for r in 0..g.len() {
                        buf[r * cols..(r + 1) * cols].fill(g[r]);
                    }
                });
            }
            OpRecord::MaxLast { x, argmax } => {
                let n = self.val(*x).numel();
                let cols = n / g.len();
                self.accumulate_with(grads, *x, n, |buf| {
                    for r in 0..g.len() {
                        buf[r * cols + argmax[r]] = g[r];
                    }
                });
            }
            OpRecord::AvgPool { x, dims } => {
                let d = *dims;
                self.accumulate_with(grads, *x, d.n * d.h * d.w * d.c, |buf| {
                    kernels::avgpool_backward(g, &d, buf);
                });
            }
            OpRecord::Pad2d { x, pad } => {
                let xs = self.val(*x).shape().to_vec();
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let p = *pad;
                let (hp, wp) = (h + 2 * p, w + 2 * p);
                self.accumulate_with(grads, *x, n * h * w * c, |buf| {
                    for ni in 0..n {
                        for hi in 0..h {
                            let src = ((ni * hp + hi + p) * wp + p) * c;
                            let dst = (ni * h + hi) * w * c;
                            buf[dst..dst + w * c].copy_from_slice(&g[src..src + w * c]);
                        }
                    }
                });
            }
            OpRecord::Reshape(x) => {
                self.accumulate_with(grads, *x, g.len(), |buf| buf.copy_from_slice(g));
            }
            OpRecord::ConcatRows(parts) => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.val(*p).numel();
                    self.accumulate_with(grads, *p, len, |buf| {
                        buf.copy_from_slice(&g[offset..offset + len]);
                    });
                    offset += len;
                }
            }
            OpRecord::SliceRows { x, start, len } => {
                let n = self.val(*x).numel();
                let row = n / self.val(*x).shape()[0];
                let (s, l) = (*start, *len);
                self.accumulate_with(grads, *x, n, |buf| {
                    buf[s * row..(s + l) * row].copy_from_slice(g);
                });
            }
            OpRecord::SumTimeBlocks { x, t } => {
                let n = self.val(*x).numel();
                let block = n / *t;
                let t = *t;
                self.accumulate_with(grads, *x, n, |buf| {
                    for ti in 0..t {
                        buf[ti * block..(ti + 1) * block].copy_from_slice(g);
                    }
                });
            }
            OpRecord::Spike { z, spec } => {
                let vz = self.val(*z).data();
                let spec = *spec;
                self.accumulate_with(grads, *z, g.len(), |buf| {
                    for i in 0..buf.len() {
                        let s = crate::surrogate::surrogate_value(&spec, vz[i])
                            .expect("spike() only records pointwise surrogates");
                        buf[i] = g[i] * s;
                    }
                });
            }
            OpRecord::RateSte { z, mask } => {
                self.accumulate_with(grads, *z, g.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] = g[i] * mask[i];
                    }
                });
            }
            OpRecord::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let channels = saved.inv_std.len();
                let rows = g.len() / channels;
                let vgamma = self.val(*gamma).data();
                // Per-channel reductions shared by every output.
                let mut dbeta = vec![0.0f32; channels];
                let mut dgamma = vec![0.0f32; channels];
                for r in 0..rows {
                    let gs = &g[r * channels..(r + 1) * channels];
                    let xh = &saved.xhat[r * channels..(r + 1) * channels];
                    for c in 0..channels {
                        dbeta[c] += gs[c];
                        dgamma[c] += gs[c] * xh[c];
                    }
                }
                if self.nodes[x.0].rg {
                    let inv_r = 1.0 / rows as f32;
                    let batch = saved.batch_stats;
                    self.accumulate_with(grads, *x, g.len(), |buf| {
                        for r in 0..rows {
                            let gs = &g[r * channels..(r + 1) * channels];
                            let xh = &saved.xhat[r * channels..(r + 1) * channels];
                            let out = &mut buf[r * channels..(r + 1) * channels];
                            for c in 0..channels {
                                let scale = vgamma[c] * saved.inv_std[c];
                                out[c] = if batch {
                                    scale
                                        * (gs[c]
                                            - dbeta[c] * inv_r
                                            - xh[c] * dgamma[c] * inv_r)
                                } else {
                                    scale * gs[c]
                                };
                            }
                        }
                    });
                }
                self.accumulate_with(grads, *gamma, channels, |buf| {
                    buf.copy_from_slice(&dgamma);
                });
                self.accumulate_with(grads, *beta, channels, |buf| {
                    buf.copy_from_slice(&dbeta);
                });
            }
        }
    }
}

/// Gradients for leaf variables, keyed by the `Var` that produced them.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}
