//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the recipe for
//! its adjoint. `backward` walks the nodes in exact reverse execution order and
//! adds the resulting leaf gradients into the leaf tensors, so calling it twice
//! without `zero_grad` doubles them.
//!
//! Tensor ops work on the `[C, T, V]` layout (channels, frames, joints) unless
//! noted otherwise.

use crate::tensor::{dim_err, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    TapConv {
        x: Var,
        w: Var,
        offsets: Vec<usize>,
        stride: usize,
        pad_left: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    PoolMean {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalePositions {
        s: Var,
        f: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Gelu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Stack {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    KlLoss {
        logits: Var,
        target: Vec<f64>,
        rows: usize,
        classes: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::TapConv { .. } => "conv_time",
            Op::Linear { .. } => "linear_channels",
            Op::Cosine { .. } => "cosine_sim_channel",
            Op::PoolMean { .. } => "global_pool_mean",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScalePositions { .. } => "scale_positions",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Stack { .. } => "stack",
            Op::Sum { .. } => "sum",
            Op::KlLoss { .. } => "kl_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears the gradients of every leaf.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Moves a leaf's tensor (with its gradient) out of the tape.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Temporal convolution with zero padding, applied independently per joint.
    ///
    /// `x: [C_in, T, V]`, `w: [C_out, C_in, K, 1]`; output length is
    /// `floor((T + pad.0 + pad.1 - K) / stride) + 1`.
    pub fn conv_time(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let k = match self.value(w).shape() {
            &[_, _, k, 1] => k,
            s => return Err(dim_err("conv_time", format!("kernel must be [C_out,C_in,K,1], got {s:?}"))),
        };
        let offsets: Vec<usize> = (0..k).collect();
        self.tap_conv(x, w, &offsets, k, stride, pad)
    }

    /// Temporal convolution whose kernel spans `span` frames but only carries
    /// weights at `offsets`. `w: [C_out, C_in, offsets.len(), 1]` stores one
    /// weight per listed offset; every other position of the span is zero.
    pub fn tap_conv(
        &mut self,
        x: Var,
        w: Var,
        offsets: &[usize],
        span: usize,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv_time";
        let (ci, t, nv) = self.value(x).dims3(OP)?;
        let (co, wci, ntaps) = match self.value(w).shape() {
            &[co, wci, ntaps, 1] => (co, wci, ntaps),
            s => return Err(dim_err(OP, format!("kernel must be [C_out,C_in,K,1], got {s:?}"))),
        };
        if wci != ci {
            return Err(dim_err(OP, format!("kernel expects {wci} input channels, x has {ci}")));
        }
        if ntaps != offsets.len() {
            return Err(dim_err(OP, format!("{ntaps} kernel taps but {} offsets", offsets.len())));
        }
        if stride == 0 {
            return Err(TensorError::Validation { op: OP, detail: "stride must be >= 1".into() });
        }
        if offsets.iter().any(|&o| o >= span) {
            return Err(TensorError::Validation { op: OP, detail: format!("tap offsets {offsets:?} exceed span {span}") });
        }
        let padded = t + pad.0 + pad.1;
        if span > padded {
            return Err(TensorError::Validation {
                op: OP,
                detail: format!("kernel span {span} longer than padded input {padded}"),
            });
        }
        let t_out = (padded - span) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; co * t_out * nv];
        for o in 0..co {
            for c in 0..ci {
                for (k, &off) in offsets.iter().enumerate() {
                    let wk = wv[(o * ci + c) * ntaps + k];
                    if wk == 0.0 {
                        continue;
                    }
                    for n in 0..t_out {
                        let Some(src) = (n * stride + off).checked_sub(pad.0).filter(|&s| s < t) else {
                            continue;
                        };
                        let xrow = &xv[(c * t + src) * nv..(c * t + src + 1) * nv];
                        let orow = &mut out[(o * t_out + n) * nv..(o * t_out + n + 1) * nv];
                        for (y, xi) in orow.iter_mut().zip(xrow) {
                            *y += wk * xi;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, t_out, nv], out)?;
        self.push(
            value,
            Op::TapConv {
                x,
                w,
                offsets: offsets.to_vec(),
                stride,
                pad_left: pad.0,
            },
            &[x, w],
        )
    }

    /// Pointwise linear map over the channel axis: `out[:, p] = W·x[:, p] + b`
    /// for every trailing position `p`. Accepts any rank ≥ 1 with channels first.
    pub fn linear_channels(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear_channels";
        let xs = self.value(x).shape().to_vec();
        let Some(&c) = xs.first() else {
            return Err(dim_err(OP, "x must have a channel axis"));
        };
        let (d, wc) = match self.value(w).shape() {
            &[d, wc] => (d, wc),
            s => return Err(dim_err(OP, format!("W must be [D,C], got {s:?}"))),
        };
        if wc != c {
            return Err(dim_err(OP, format!("W has {wc} columns, x has {c} channels")));
        }
        if self.value(b).shape() != [d] {
            return Err(dim_err(OP, format!("bias must be [{d}], got {:?}", self.value(b).shape())));
        }
        let p = self.value(x).numel() / c.max(1);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; d * p];
        for (o, orow) in out.chunks_mut(p.max(1)).enumerate().take(d) {
            orow.iter_mut().for_each(|y| *y = bv[o]);
            for ch in 0..c {
                let wk = wv[o * c + ch];
                let xrow = &xv[ch * p..(ch + 1) * p];
                for (y, xi) in orow.iter_mut().zip(xrow) {
                    *y += wk * xi;
                }
            }
        }
        let mut shape = xs;
        shape[0] = d;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Cosine similarity across the channel axis at every `(t, v)`, with
    /// norms clamped below by `eps`. Output shape `[1, T, V]`.
    pub fn cosine_sim_channel(&mut self, a: Var, b: Var, eps: f64) -> Result<Var, TensorError> {
        const OP: &str = "cosine_sim_channel";
        same_shape(OP, self.value(a), self.value(b))?;
        let (d, t, nv) = self.value(a).dims3(OP)?;
        if eps <= 0.0 {
            return Err(TensorError::Validation { op: OP, detail: "eps must be positive".into() });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let p = t * nv;
        let mut dot = vec![0.0; p];
        let mut na = vec![0.0; p];
        let mut nb = vec![0.0; p];
        for c in 0..d {
            for i in 0..p {
                let (x, y) = (av[c * p + i], bv[c * p + i]);
                dot[i] += x * y;
                na[i] += x * x;
                nb[i] += y * y;
            }
        }
        let out = (0..p)
            .map(|i| dot[i] / (na[i].sqrt().max(eps) * nb[i].sqrt().max(eps)))
            .collect();
        let value = Tensor::new(vec![1, t, nv], out)?;
        self.push(value, Op::Cosine { a, b, eps }, &[a, b])
    }

    /// Mean over every non-channel position; `[C, ...] -> [C]`.
    pub fn global_pool_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let Some(&c) = xt.shape().first() else {
            return Err(dim_err("global_pool_mean", "x must have a channel axis"));
        };
        let p = xt.numel() / c.max(1);
        if p == 0 {
            return Err(dim_err("global_pool_mean", "no positions to pool"));
        }
        let out = xt
            .data()
            .chunks(p)
            .map(|row| row.iter().sum::<f64>() / p as f64)
            .collect();
        let value = Tensor::new(vec![c], out)?;
        self.push(value, Op::PoolMean { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    /// `out[c, t, v] = s[0, t, v] * f[c, t, v]`.
    pub fn scale_positions(&mut self, s: Var, f: Var) -> Result<Var, TensorError> {
        const OP: &str = "scale_positions";
        let (_, t, nv) = self.value(f).dims3(OP)?;
        if self.value(s).shape() != [1, t, nv] {
            return Err(dim_err(OP, format!("weight {:?} vs features {:?}", self.value(s).shape(), self.value(f).shape())));
        }
        let p = t * nv;
        let sv = self.value(s).data();
        let out = self
            .value(f)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| sv[i % p] * x)
            .collect();
        let value = Tensor::new(self.value(f).shape().to_vec(), out)?;
        self.push(value, Op::ScalePositions { s, f }, &[s, f])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|v| v * k).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(value, Op::Scale { x, k }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let mut value = self.value(x).reshape(shape)?;
        value.set_requires_grad(false);
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("stack of zero tensors".into()));
        };
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).numel());
        for &p in parts {
            if self.value(p).shape() != inner.as_slice() {
                return Err(dim_err("stack", format!("{:?} vs {inner:?}", self.value(p).shape())));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Stack { parts: parts.to_vec() }, parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))` with `0·log 0 = 0`.
    ///
    /// `logits: [N, K]`; `target` is row-major `N × K` and every row must be a
    /// probability vector (non-negative, summing to 1 within 1e-9).
    pub fn kl_loss(&mut self, logits: Var, target: &[f64]) -> Result<Var, TensorError> {
        const OP: &str = "kl_loss";
        let (rows, classes) = match self.value(logits).shape() {
            &[n, k] => (n, k),
            s => return Err(dim_err(OP, format!("logits must be [N,K], got {s:?}"))),
        };
        if classes < 2 {
            return Err(TensorError::Validation { op: OP, detail: "need at least two classes".into() });
        }
        if target.len() != rows * classes {
            return Err(dim_err(OP, format!("target has {} entries, logits {rows}x{classes}", target.len())));
        }
        for (r, row) in target.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(TensorError::Validation {
                    op: OP,
                    detail: format!("target row {r} is not a probability vector (sum {sum})"),
                });
            }
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (row, trow) in lv.chunks(classes).zip(target.chunks(classes)) {
            let lse = log_sum_exp(row);
            for (&z, &p) in row.iter().zip(trow) {
                if p > 0.0 {
                    total += p * (p.ln() - (z - lse));
                }
            }
        }
        let loss = total / rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::KlLoss {
                logits,
                target: target.to_vec(),
                rows,
                classes,
            },
            &[logits],
        )
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_traced(loss).map(|_| ())
    }

    /// Like [`Tape::backward`], also returning the indices of the non-leaf
    /// nodes whose adjoint was propagated, in visiting order.
    pub fn backward_traced(&mut self, loss: Var) -> Result<Vec<usize>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut trace = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
            } else {
                trace.push(idx);
                self.propagate(idx, &g, &mut adj);
            }
        }
        Ok(trace)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {
                adjoint_slot(adj, $v, self.value($v).numel())
            };
        }
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::TapConv { x, w, offsets, stride, pad_left } => {
                let (ci, t, nv) = self.value(*x).dims3("conv_time").unwrap();
                let wshape = self.value(*w).shape();
                let (co, ntaps) = (wshape[0], wshape[2]);
                let t_out = self.nodes[idx].value.shape()[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*x) {
                    let dx = slot!(*x);
                    for o in 0..co {
                        for c in 0..ci {
                            for (k, &off) in offsets.iter().enumerate() {
                                let wk = wv[(o * ci + c) * ntaps + k];
                                for n in 0..t_out {
                                    let Some(src) = (n * stride + off).checked_sub(*pad_left).filter(|&s| s < t) else {
                                        continue;
                                    };
                                    let grow = &g[(o * t_out + n) * nv..(o * t_out + n + 1) * nv];
                                    let drow = &mut dx[(c * t + src) * nv..(c * t + src + 1) * nv];
                                    for (d, gi) in drow.iter_mut().zip(grow) {
                                        *d += wk * gi;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = slot!(*w);
                    for o in 0..co {
                        for c in 0..ci {
                            for (k, &off) in offsets.iter().enumerate() {
                                let mut s = 0.0;
                                for n in 0..t_out {
                                    let Some(src) = (n * stride + off).checked_sub(*pad_left).filter(|&s| s < t) else {
                                        continue;
                                    };
                                    let grow = &g[(o * t_out + n) * nv..(o * t_out + n + 1) * nv];
                                    let xrow = &xv[(c * t + src) * nv..(c * t + src + 1) * nv];
                                    s += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                dw[(o * ci + c) * ntaps + k] += s;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let c = self.value(*x).shape()[0];
                let d = self.value(*w).shape()[0];
                let p = self.value(*x).numel() / c.max(1);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*x) {
                    let dx = slot!(*x);
                    for o in 0..d {
                        let grow = &g[o * p..(o + 1) * p];
                        for ch in 0..c {
                            let wk = wv[o * c + ch];
                            for (dxi, gi) in dx[ch * p..(ch + 1) * p].iter_mut().zip(grow) {
                                *dxi += wk * gi;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = slot!(*w);
                    for o in 0..d {
                        let grow = &g[o * p..(o + 1) * p];
                        for ch in 0..c {
                            dw[o * c + ch] += grow.iter().zip(&xv[ch * p..(ch + 1) * p]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.wants(*b) {
                    let db = slot!(*b);
                    for o in 0..d {
                        db[o] += g[o * p..(o + 1) * p].iter().sum::<f64>();
                    }
                }
            }
            Op::Cosine { a, b, eps } => {
                let (d, t, nv) = self.value(*a).dims3("cosine_sim_channel").unwrap();
                let p = t * nv;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let s = self.nodes[idx].value.data();
                let mut na = vec![0.0; p];
                let mut nb = vec![0.0; p];
                for c in 0..d {
                    for i in 0..p {
                        na[i] += av[c * p + i] * av[c * p + i];
                        nb[i] += bv[c * p + i] * bv[c * p + i];
                    }
                }
                na.iter_mut().for_each(|v| *v = v.sqrt());
                nb.iter_mut().for_each(|v| *v = v.sqrt());
                // s = dot / (ca * cb) with ca = max(|a|, eps); the clamp has
                // zero derivative below eps.
                let side = |u: &[f64], other: &[f64], nu: &[f64], no: &[f64], dst: &mut [f64]| {
                    for i in 0..p {
                        let cu = nu[i].max(*eps);
                        let co = no[i].max(*eps);
                        let clamp_active = nu[i] > *eps;
                        for c in 0..d {
                            let j = c * p + i;
                            let mut dsdu = other[j] / (cu * co);
                            if clamp_active {
                                dsdu -= s[i] * u[j] / (nu[i] * nu[i]);
                            }
                            dst[j] += g[i] * dsdu;
                        }
                    }
                };
                if self.wants(*a) {
                    side(av, bv, &na, &nb, slot!(*a));
                }
                if self.wants(*b) {
                    side(bv, av, &nb, &na, slot!(*b));
                }
            }
            Op::PoolMean { x } => {
                let c = self.value(*x).shape()[0];
                let p = self.value(*x).numel() / c;
                let dx = slot!(*x);
                for ch in 0..c {
                    let share = g[ch] / p as f64;
                    dx[ch * p..(ch + 1) * p].iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    slot!(*a).iter_mut().zip(g).zip(bv).for_each(|((d, gi), y)| *d += gi * y);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    slot!(*b).iter_mut().zip(g).zip(av).for_each(|((d, gi), x)| *d += gi * x);
                }
            }
            Op::ScalePositions { s, f } => {
                let p = self.value(*s).numel();
                if self.wants(*s) {
                    let fv = self.value(*f).data();
                    let ds = slot!(*s);
                    for (i, (gi, fi)) in g.iter().zip(fv).enumerate() {
                        ds[i % p] += gi * fi;
                    }
                }
                if self.wants(*f) {
                    let sv = self.value(*s).data();
                    let df = slot!(*f);
                    for (i, (d, gi)) in df.iter_mut().zip(g).enumerate() {
                        *d += gi * sv[i % p];
                    }
                }
            }
            Op::Scale { x, k } => {
                slot!(*x).iter_mut().zip(g).for_each(|(d, gi)| *d += k * gi);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = slot!(*x);
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                }
            }
            Op::Reshape { x } => {
                slot!(*x).iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            Op::Stack { parts } => {
                let n = self.value(parts[0]).numel();
                for (i, &pv) in parts.iter().enumerate() {
                    if self.wants(pv) {
                        slot!(pv).iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Sum { x } => {
                slot!(*x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::KlLoss { logits, target, rows, classes } => {
                let lv = self.value(*logits).data();
                let dl = slot!(*logits);
                let scale = g[0] / *rows as f64;
                for r in 0..*rows {
                    let row = &lv[r * classes..(r + 1) * classes];
                    let lse = log_sum_exp(row);
                    for k in 0..*classes {
                        let q = (row[k] - lse).exp();
                        dl[r * classes + k] += scale * (q - target[r * classes + k]);
                    }
                }
            }
        }
    }
}

fn adjoint_slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one score vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| (z - lse).exp()).collect()
}
