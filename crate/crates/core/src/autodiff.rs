//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its backward rule. Node inputs always precede the node,
//! so the tape is topologically ordered by construction and a single
//! reverse sweep visits each node exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Statistics that batch norm needs, either computed from the batch or
/// supplied from running averages.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch mean and biased variance observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Contract {
        x: usize,
        w: usize,
        outer: usize,
        cin: usize,
        cout: usize,
        inner: usize,
    },
    Conv1d {
        x: usize,
        kernels: usize,
        bias: usize,
        outer: usize,
        c_in: usize,
        c_out: usize,
        t_in: usize,
        k: usize,
    },
    Glu {
        x: usize,
        outer: usize,
        half: usize,
        inner: usize,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        outer: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddBias {
        x: usize,
        bias: usize,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Select {
        x: usize,
        outer: usize,
        dim: usize,
        inner: usize,
        index: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_with(shape, value, op, requires_grad)
    }

    fn push_with(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated if the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_with(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that is always differentiated.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_with(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_with(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                for (o, &bj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += s * bj;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    /// Contracts `axis` of `x` against the rows of the matrix `w`:
    /// `out[.., o, ..] = sum_c x[.., c, ..] * w[c, o]`.
    pub fn contract(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if axis >= sx.len() || sw.len() != 2 || sx[axis] != sw[0] {
            return Err(Error::shape("contract", sx, sw));
        }
        let (outer, cin, inner) = split_axis(sx, axis);
        let cout = sw[1];
        let mut shape = sx.to_vec();
        shape[axis] = cout;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; outer * cout * inner];
        if inner == 1 {
            // contraction over the last axis: row times matrix
            for (xr, yr) in xv.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
                for (&xc, wr) in xr.iter().zip(wv.chunks_exact(cout)) {
                    for (y, &wd) in yr.iter_mut().zip(wr) {
                        *y += xc * wd;
                    }
                }
            }
        } else {
            Self::contract_strided(xv, wv, &mut out, outer, cin, cout, inner);
        }
        let op = Op::Contract {
            x: x.0,
            w: w.0,
            outer,
            cin,
            cout,
            inner,
        };
        Ok(self.push(shape, out, op, &[x.0, w.0]))
    }

    fn contract_strided(xv: &[f64], wv: &[f64], out: &mut [f64], outer: usize, cin: usize, cout: usize, inner: usize) {
        for o in 0..outer {
            let xo = &xv[o * cin * inner..(o + 1) * cin * inner];
            let yo = &mut out[o * cout * inner..(o + 1) * cout * inner];
            for c in 0..cin {
                let xrow = &xo[c * inner..(c + 1) * inner];
                for d in 0..cout {
                    let s = wv[c * cout + d];
                    for (y, &xi) in yo[d * inner..(d + 1) * inner].iter_mut().zip(xrow) {
                        *y += s * xi;
                    }
                }
            }
        }
    }

    /// Valid (unpadded) 1-D cross-correlation over the last axis.
    ///
    /// `x` is `[.., C_in, T]`, `kernels` is `[C_out, C_in, k]`, `bias` is
    /// `[C_out]`; the result is `[.., C_out, T - k + 1]`. Kernels are not
    /// flipped.
    pub fn conv1d_valid(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernels), self.shape(bias));
        if sx.len() < 2 || sk.len() != 3 || sx[sx.len() - 2] != sk[1] {
            return Err(Error::shape("conv1d_valid", sx, sk));
        }
        if sb != [sk[0]] {
            return Err(Error::shape("conv1d_valid bias", sk, sb));
        }
        let (c_out, c_in, k) = (sk[0], sk[1], sk[2]);
        let t_in = sx[sx.len() - 1];
        if k == 0 || t_in < k {
            return Err(Error::WindowTooShort { len: t_in, kernel: k });
        }
        let t_out = t_in - k + 1;
        let outer: usize = sx[..sx.len() - 2].iter().product();
        let mut shape = sx.to_vec();
        let rank = shape.len();
        shape[rank - 2] = c_out;
        shape[rank - 1] = t_out;
        let (xv, kv, bv) = (self.value(x), self.value(kernels), self.value(bias));
        let mut out = vec![0.0; outer * c_out * t_out];
        for o in 0..outer {
            let xo = &xv[o * c_in * t_in..(o + 1) * c_in * t_in];
            for co in 0..c_out {
                let y = &mut out[(o * c_out + co) * t_out..(o * c_out + co + 1) * t_out];
                y.fill(bv[co]);
                for ci in 0..c_in {
                    let xrow = &xo[ci * t_in..(ci + 1) * t_in];
                    for j in 0..k {
                        let w = kv[(co * c_in + ci) * k + j];
                        for (yt, &xt) in y.iter_mut().zip(&xrow[j..j + t_out]) {
                            *yt += w * xt;
                        }
                    }
                }
            }
        }
        let op = Op::Conv1d {
            x: x.0,
            kernels: kernels.0,
            bias: bias.0,
            outer,
            c_in,
            c_out,
            t_in,
            k,
        };
        Ok(self.push(shape, out, op, &[x.0, kernels.0, bias.0]))
    }

    /// Gated linear unit over the second-to-last (channel) axis:
    /// the first half of the channels gated by the sigmoid of the second.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::invalid("glu", format!("needs a [.., C, T] input, got {sx:?}")));
        }
        let axis = sx.len() - 2;
        let (outer, channels, inner) = split_axis(sx, axis);
        if channels % 2 != 0 {
            return Err(Error::OddChannels(channels));
        }
        let half = channels / 2;
        let mut shape = sx.to_vec();
        shape[axis] = half;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * half * inner);
        for o in 0..outer {
            let base = o * channels * inner;
            for j in 0..half * inner {
                let p = xv[base + j];
                let q = xv[base + half * inner + j];
                out.push(p * sigmoid(q));
            }
        }
        let op = Op::Glu {
            x: x.0,
            outer,
            half,
            inner,
        };
        Ok(self.push(shape, out, op, &[x.0]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Act { x: x.0, kind }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// With [`NormStats::Batch`] the statistics come from `x` itself (biased
    /// variance) and are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm", format!("eps must be positive, got {eps}")));
        }
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::invalid("batch_norm", format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, channels, inner) = split_axis(sx, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::shape("batch_norm", sx, self.shape(p)));
            }
        }
        let shape = sx.to_vec();
        let xv = self.value(x);
        let count = (outer * inner) as f64;
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let s = (o * channels + c) * inner;
                        mean[c] += xv[s..s + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for c in 0..channels {
                        let s = (o * channels + c) * inner;
                        var[c] += xv[s..s + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("running stats sized {} for {channels} channels", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..channels {
                let s = (o * channels + c) * inner;
                for i in s..s + inner {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            outer,
            channels,
            inner,
            xhat,
            inv_std,
            batch_stats: observed.is_some(),
        };
        let v = self.push(shape, out, op, &[x.0, gamma.0, beta.0]);
        Ok((v, observed))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, factor }, &[x.0])
    }

    /// Adds a vector along `axis`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || self.shape(bias) != [sx[axis]] {
            return Err(Error::shape("add_bias", sx, self.shape(bias)));
        }
        let (outer, dim, inner) = split_axis(sx, axis);
        let shape = sx.to_vec();
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for (d, &b) in bv.iter().enumerate() {
                let s = (o * dim + d) * inner;
                out[s..s + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let op = Op::AddBias {
            x: x.0,
            bias: bias.0,
            outer,
            dim,
            inner,
        };
        Ok(self.push(shape, out, op, &[x.0, bias.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != self.value(x).len()
        {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || index >= sx[axis] {
            return Err(Error::invalid("select", format!("index {index} on axis {axis} of {sx:?}")));
        }
        let (outer, dim, inner) = split_axis(sx, axis);
        let mut shape: Vec<usize> = sx.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let s = (o * dim + index) * inner;
            out.extend_from_slice(&xv[s..s + inner]);
        }
        let op = Op::Select {
            x: x.0,
            outer,
            dim,
            inner,
            index,
        };
        Ok(self.push(shape, out, op, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { x: x.0 }, &[x.0])
    }

    /// Mean squared error over all entries; a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).len() as f64;
        let s = self.zip_with(pred, target, |p, t| (p - t) * (p - t)).iter().sum::<f64>() / n;
        let op = Op::Mse {
            pred: pred.0,
            target: target.0,
        };
        Ok(self.push(vec![1], vec![s], op, &[pred.0, target.0]))
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Every differentiated leaf has a gradient after `backward`, zero when
    /// the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => t.set_grad(vec![0.0; t.numel()]),
        }
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape can be swept
    /// once; a second call is rejected rather than accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_slice();

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bv = val(b);
                    let da = acc(grads, a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let db = acc(grads, b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let s = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += s * g[i * n + j];
                            }
                        }
                    }
                }
            }
            &Op::Contract {
                x,
                w,
                outer,
                cin,
                cout,
                inner,
            } => {
                if inner == 1 {
                    if wants(x) {
                        let wv = val(w);
                        let dx = acc(grads, x, outer * cin);
                        for (dxr, gr) in dx.chunks_exact_mut(cin).zip(g.chunks_exact(cout)) {
                            for (a, wr) in dxr.iter_mut().zip(wv.chunks_exact(cout)) {
                                *a += wr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                    if wants(w) {
                        let xv = val(x);
                        let dw = acc(grads, w, cin * cout);
                        for (xr, gr) in xv.chunks_exact(cin).zip(g.chunks_exact(cout)) {
                            for (&xc, dwr) in xr.iter().zip(dw.chunks_exact_mut(cout)) {
                                for (a, &q) in dwr.iter_mut().zip(gr) {
                                    *a += xc * q;
                                }
                            }
                        }
                    }
                    return;
                }
                if wants(x) {
                    let wv = val(w);
                    let dx = acc(grads, x, outer * cin * inner);
                    for o in 0..outer {
                        for c in 0..cin {
                            let dxr = &mut dx[(o * cin + c) * inner..(o * cin + c + 1) * inner];
                            for d in 0..cout {
                                let s = wv[c * cout + d];
                                let gr = &g[(o * cout + d) * inner..(o * cout + d + 1) * inner];
                                for (a, &b) in dxr.iter_mut().zip(gr) {
                                    *a += s * b;
                                }
                            }
                        }
                    }
                }
                if wants(w) {
                    let xv = val(x);
                    let dw = acc(grads, w, cin * cout);
                    for o in 0..outer {
                        for c in 0..cin {
                            let xr = &xv[(o * cin + c) * inner..(o * cin + c + 1) * inner];
                            for d in 0..cout {
                                let gr = &g[(o * cout + d) * inner..(o * cout + d + 1) * inner];
                                dw[c * cout + d] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
            &Op::Conv1d {
                x,
                kernels,
                bias,
                outer,
                c_in,
                c_out,
                t_in,
                k,
            } => {
                let t_out = t_in - k + 1;
                if wants(bias) {
                    let db = acc(grads, bias, c_out);
                    for o in 0..outer {
                        for (co, d) in db.iter_mut().enumerate() {
                            let s = (o * c_out + co) * t_out;
                            *d += g[s..s + t_out].iter().sum::<f64>();
                        }
                    }
                }
                if wants(kernels) {
                    let xv = val(x);
                    let dk = acc(grads, kernels, c_out * c_in * k);
                    for o in 0..outer {
                        for co in 0..c_out {
                            let gr = &g[(o * c_out + co) * t_out..(o * c_out + co + 1) * t_out];
                            for ci in 0..c_in {
                                let xr = &xv[(o * c_in + ci) * t_in..(o * c_in + ci + 1) * t_in];
                                for j in 0..k {
                                    dk[(co * c_in + ci) * k + j] +=
                                        gr.iter().zip(&xr[j..j + t_out]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if wants(x) {
                    let kv = val(kernels);
                    let dx = acc(grads, x, outer * c_in * t_in);
                    for o in 0..outer {
                        for co in 0..c_out {
                            let gr = &g[(o * c_out + co) * t_out..(o * c_out + co + 1) * t_out];
                            for ci in 0..c_in {
                                let dxr = &mut dx[(o * c_in + ci) * t_in..(o * c_in + ci + 1) * t_in];
                                for j in 0..k {
                                    let w = kv[(co * c_in + ci) * k + j];
                                    for (d, &gt) in dxr[j..j + t_out].iter_mut().zip(gr) {
                                        *d += w * gt;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::Glu { x, outer, half, inner } => {
                if wants(x) {
                    let xv = val(x);
                    let dx = acc(grads, x, outer * 2 * half * inner);
                    for o in 0..outer {
                        let base = o * 2 * half * inner;
                        for j in 0..half * inner {
                            let p = xv[base + j];
                            let s = sigmoid(xv[base + half * inner + j]);
                            let go = g[o * half * inner + j];
                            dx[base + j] += go * s;
                            dx[base + half * inner + j] += go * p * s * (1.0 - s);
                        }
                    }
                }
            }
            &Op::Act { x, kind } => {
                if wants(x) {
                    let (xv, yv) = (val(x), val(idx));
                    let dx = acc(grads, x, xv.len());
                    for i in 0..xv.len() {
                        let local = match kind {
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Activation::Tanh => 1.0 - yv[i] * yv[i],
                        };
                        dx[i] += g[i] * local;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let at = |o: usize, c: usize| (o * channels + c) * inner;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let s = at(o, c);
                        for i in s..s + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(beta) {
                    let db = acc(grads, beta, channels);
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if wants(gamma) {
                    let dg = acc(grads, gamma, channels);
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if wants(x) {
                    let gv = val(gamma);
                    let dx = acc(grads, x, outer * channels * inner);
                    let m = (outer * inner) as f64;
                    for o in 0..outer {
                        for c in 0..channels {
                            let s = at(o, c);
                            let scale = gv[c] * inv_std[c];
                            for i in s..s + inner {
                                dx[i] += if *batch_stats {
                                    // d xhat = g * gamma, folded into `scale`
                                    scale * (g[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for (i, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(i) {
                        acc(grads, i, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (i, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(i) {
                        acc(grads, i, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (i, other) in [(a, b), (b, a)] {
                    if wants(i) {
                        let ov = val(other);
                        let d = acc(grads, i, g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * ov[j];
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if wants(x) {
                    acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += factor * v);
                }
            }
            &Op::AddBias {
                x,
                bias,
                outer,
                dim,
                inner,
            } => {
                if wants(x) {
                    acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if wants(bias) {
                    let db = acc(grads, bias, dim);
                    for o in 0..outer {
                        for (d, slot) in db.iter_mut().enumerate() {
                            let s = (o * dim + d) * inner;
                            *slot += g[s..s + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if wants(x) {
                    acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Select {
                x,
                outer,
                dim,
                inner,
                index,
            } => {
                if wants(x) {
                    let dx = acc(grads, x, outer * dim * inner);
                    for o in 0..outer {
                        let s = (o * dim + index) * inner;
                        dx[s..s + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    let n = val(x).len();
                    acc(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if wants(x) {
                    let n = val(x).len();
                    let s = g[0] / n as f64;
                    acc(grads, x, n).iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Mse { pred, target } => {
                let (pv, tv) = (val(pred), val(target));
                let n = pv.len() as f64;
                for (i, sign) in [(pred, 1.0), (target, -1.0)] {
                    if wants(i) {
                        let d = acc(grads, i, pv.len());
                        for j in 0..pv.len() {
                            d[j] += sign * g[0] * 2.0 * (pv[j] - tv[j]) / n;
                        }
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}
