//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed on it, in execution order, so
//! the node list is topologically sorted by construction. [`Tape::backward`]
//! walks it once in reverse. Tapes are rebuilt for every forward pass.
//!
//! Broadcasting is limited to adding a bias row across the batch dimension;
//! every other operand pair must have identical shapes.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: Conv2dGeometry,
    },
    MeanPool {
        input: usize,
        kernel: usize,
        stride: usize,
    },
    LogSoftmax {
        input: usize,
        temperature: f64,
    },
    Softmax {
        input: usize,
        temperature: f64,
    },
    SoftTargetLoss {
        logits: usize,
        targets: Vec<f64>,
        temperature: f64,
        coeff: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

/// Row-wise `log softmax(z / T)` with max subtraction.
pub fn log_softmax_rows(values: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(cols) {
        let max = row
            .iter()
            .map(|&z| z / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z / temperature - max).exp()).sum();
        let lse = max + sum.ln();
        out.extend(row.iter().map(|&z| z / temperature - lse));
    }
    out
}

/// Row-wise `softmax(z / T)` with max subtraction.
pub fn softmax_rows(values: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(cols) {
        let max = row
            .iter()
            .map(|&z| z / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z / temperature - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= sum);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(var.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, index }
    }

    /// Records a tensor as a leaf. It receives a gradient iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[self.idx(var).expect("foreign variable")].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[self.idx(var).expect("foreign variable")].shape
    }

    pub fn to_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[self.idx(var).expect("foreign variable")];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn node(&self, var: Var) -> Result<(usize, &Node)> {
        let i = self.idx(var)?;
        Ok((i, &self.nodes[i]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let (ib, nb) = self.node(b)?;
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = na.value[i * k + kk];
                let brow = &nb.value[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(ia, ib), ng))
    }

    /// Adds a bias vector of length `cols` to every row of a `[rows, cols]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let (ib, nb) = self.node(bias)?;
        let cols = nb.value.len();
        if nx.shape.len() != 2 || nx.shape[1] != cols || nb.shape.len() != 1 {
            return Err(Error::shape("add_bias", &nx.shape, &nb.shape));
        }
        let mut out = nx.value.clone();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(&nb.value).for_each(|(o, b)| *o += b);
        }
        let ng = nx.needs_grad || nb.needs_grad;
        Ok(self.push(nx.shape.clone(), out, Op::AddBias(ix, ib), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let (ib, nb) = self.node(b)?;
        if na.shape != nb.shape {
            return Err(Error::shape(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let ng = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        Ok(self.push(shape, out, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let out = nx.value.iter().map(|&v| f(v)).collect();
        let (shape, ng) = (nx.shape.clone(), nx.needs_grad);
        Ok(self.push(shape, out, op(ix), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let out = nx.value.iter().map(|&v| v * factor).collect();
        let (shape, ng) = (nx.shape.clone(), nx.needs_grad);
        Ok(self.push(shape, out, Op::Scale(ix, factor), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let (_, nx) = self.node(x)?;
        if let Some((index, &value)) = nx.value.iter().enumerate().find(|(_, &v)| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let total = nx.value.iter().sum();
        let ng = nx.needs_grad;
        Ok(self.push(vec![1], vec![total], Op::Sum(ix), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let total: f64 = nx.value.iter().sum();
        let mean = total / nx.value.len() as f64;
        let ng = nx.needs_grad;
        Ok(self.push(vec![1], vec![mean], Op::Mean(ix), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        if shape.iter().product::<usize>() != nx.value.len() {
            return Err(Error::shape("reshape", &nx.shape, &shape));
        }
        let (value, ng) = (nx.value.clone(), nx.needs_grad);
        Ok(self.push(shape, value, Op::Reshape(ix), ng))
    }

    /// Direct 2-D convolution over `[N, C, H, W]` with weight `[O, C, K, K]`,
    /// bias `[O]`, and zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        let (iw, nw) = self.node(weight)?;
        let (ib, nb) = self.node(bias)?;
        if nx.shape.len() != 4
            || nw.shape.len() != 4
            || nx.shape[1] != nw.shape[1]
            || nw.shape[2] != nw.shape[3]
        {
            return Err(Error::shape("conv2d", &nx.shape, &nw.shape));
        }
        if nb.shape != [nw.shape[0]] {
            return Err(Error::shape("conv2d bias", &nw.shape, &nb.shape));
        }
        let [n, c, h, w] = [nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]];
        let (o, k) = (nw.shape[0], nw.shape[2]);
        let (Some(ho), Some(wo)) = (
            conv_out(h, k, geom.stride, geom.padding),
            conv_out(w, k, geom.stride, geom.padding),
        ) else {
            return Err(Error::shape("conv2d", &nx.shape, &nw.shape));
        };
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = nb.value[oi];
                        for ci in 0..c {
                            for kh in 0..k {
                                let ih = oh as isize * s + kh as isize - p;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw_ = ow as isize * s + kw as isize - p;
                                    if iw_ < 0 || iw_ >= w as isize {
                                        continue;
                                    }
                                    let xv = nx.value
                                        [((ni * c + ci) * h + ih as usize) * w + iw_ as usize];
                                    let wv = nw.value[((oi * c + ci) * k + kh) * k + kw];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        let ng = nx.needs_grad || nw.needs_grad || nb.needs_grad;
        Ok(self.push(
            vec![n, o, ho, wo],
            out,
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            },
            ng,
        ))
    }

    /// Mean pooling over `[N, C, H, W]` windows without padding.
    pub fn mean_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (ix, nx) = self.node(x)?;
        if nx.shape.len() != 4 || kernel == 0 {
            return Err(Error::shape("mean_pool", &nx.shape, &[kernel, stride]));
        }
        let [n, c, h, w] = [nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]];
        let (Some(ho), Some(wo)) = (conv_out(h, kernel, stride, 0), conv_out(w, kernel, stride, 0))
        else {
            return Err(Error::shape("mean_pool", &nx.shape, &[kernel, stride]));
        };
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &nx.value[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            acc += src[(oh * stride + kh) * w + ow * stride + kw];
                        }
                    }
                    out[(plane * ho + oh) * wo + ow] = acc * inv;
                }
            }
        }
        let ng = nx.needs_grad;
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            Op::MeanPool {
                input: ix,
                kernel,
                stride,
            },
            ng,
        ))
    }

    fn check_rows(&self, op: &'static str, x: Var, temperature: f64) -> Result<(usize, usize)> {
        let (ix, nx) = self.node(x)?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{op}: temperature must be positive, got {temperature}"
            )));
        }
        if nx.shape.len() != 2 {
            return Err(Error::shape(op, &nx.shape, &[]));
        }
        Ok((ix, nx.shape[1]))
    }

    /// Row-wise `log softmax(x / T)`.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let (ix, cols) = self.check_rows("log_softmax", x, temperature)?;
        let nx = &self.nodes[ix];
        let out = log_softmax_rows(&nx.value, cols, temperature);
        let (shape, ng) = (nx.shape.clone(), nx.needs_grad);
        Ok(self.push(
            shape,
            out,
            Op::LogSoftmax {
                input: ix,
                temperature,
            },
            ng,
        ))
    }

    /// Row-wise `softmax(x / T)`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let (ix, cols) = self.check_rows("softmax", x, temperature)?;
        let nx = &self.nodes[ix];
        let out = softmax_rows(&nx.value, cols, temperature);
        let (shape, ng) = (nx.shape.clone(), nx.needs_grad);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                input: ix,
                temperature,
            },
            ng,
        ))
    }

    /// Fused soft-target loss over a `[B, C]` logit matrix:
    ///
    /// `coeff / B * sum_{b,c} t[b,c] * (lt[b,c] - log softmax(z / T)[b,c])`
    ///
    /// where `lt` is `target_log_probs` (zero when absent, giving plain
    /// cross-entropy). Targets must be probability rows; the backward pass
    /// is `coeff / (T * B) * (softmax(z / T) - t)`.
    pub fn soft_target_loss(
        &mut self,
        logits: Var,
        targets: &[f64],
        target_log_probs: Option<&[f64]>,
        temperature: f64,
        coeff: f64,
    ) -> Result<Var> {
        let (ix, cols) = self.check_rows("soft_target_loss", logits, temperature)?;
        let nx = &self.nodes[ix];
        if targets.len() != nx.value.len()
            || target_log_probs.is_some_and(|l| l.len() != nx.value.len())
        {
            return Err(Error::shape("soft_target_loss", &nx.shape, &[targets.len()]));
        }
        let batch = nx.shape[0] as f64;
        let log_probs = log_softmax_rows(&nx.value, cols, temperature);
        let mut total = 0.0;
        for (i, (&t, &ls)) in targets.iter().zip(&log_probs).enumerate() {
            if t != 0.0 {
                let lt = target_log_probs.map_or(0.0, |l| l[i]);
                total += t * (lt - ls);
            }
        }
        let probs = log_probs.iter().map(|&l| l.exp()).collect();
        let ng = nx.needs_grad;
        Ok(self.push(
            vec![1],
            vec![coeff * total / batch],
            Op::SoftTargetLoss {
                logits: ix,
                targets: targets.to_vec(),
                temperature,
                coeff,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Only nodes that need a gradient
    /// are visited, each once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, found shape {:?}",
                self.nodes[li].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let n = nodes[b].shape[1];
                if wants(a) {
                    let bv = &nodes[b].value;
                    let da = acc(grads, a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            da[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    let db = acc(grads, b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += aik * gv);
                        }
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if wants(x) {
                    let dx = acc(grads, x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if wants(b) {
                    let cols = nodes[b].value.len();
                    let db = acc(grads, b, cols);
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    let da = acc(grads, a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if wants(b) {
                    let db = acc(grads, b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = &nodes[b].value;
                    let da = acc(grads, a, g.len());
                    for ((d, v), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += v * y;
                    }
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    let db = acc(grads, b, g.len());
                    for ((d, v), x) in db.iter_mut().zip(g).zip(av) {
                        *d += v * x;
                    }
                }
            }
            &Op::Scale(x, f) => {
                let dx = acc(grads, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v * f);
            }
            &Op::Relu(x) => {
                let xv = &nodes[x].value;
                let dx = acc(grads, x, g.len());
                for ((d, v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += v;
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = &nodes[x].value;
                let dx = acc(grads, x, g.len());
                for ((d, v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += v * gelu_grad(xi);
                }
            }
            &Op::Exp(x) => {
                let dx = acc(grads, x, g.len());
                for ((d, v), y) in dx.iter_mut().zip(g).zip(&node.value) {
                    *d += v * y;
                }
            }
            &Op::Log(x) => {
                let xv = &nodes[x].value;
                let dx = acc(grads, x, g.len());
                for ((d, v), xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += v / xi;
                }
            }
            &Op::Sum(x) => {
                let len = nodes[x].value.len();
                acc(grads, x, len).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean(x) => {
                let len = nodes[x].value.len();
                let share = g[0] / len as f64;
                acc(grads, x, len).iter_mut().for_each(|d| *d += share);
            }
            &Op::Reshape(x) => {
                let dx = acc(grads, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv2d_backward(node, g, grads, input, weight, bias, geom),
            &Op::MeanPool {
                input,
                kernel,
                stride,
            } => {
                let [n, c, h, w] = <[usize; 4]>::try_from(nodes[input].shape.as_slice())
                    .expect("pool input is 4-D");
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let inv = 1.0 / (kernel * kernel) as f64;
                let dx = acc(grads, input, n * c * h * w);
                for plane in 0..n * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let share = g[(plane * ho + oh) * wo + ow] * inv;
                            for kh in 0..kernel {
                                for kw in 0..kernel {
                                    dx[plane * h * w + (oh * stride + kh) * w + ow * stride + kw] +=
                                        share;
                                }
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { input, temperature } => {
                let cols = node.shape[1];
                let dx = acc(grads, input, g.len());
                for ((drow, grow), lrow) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(node.value.chunks(cols))
                {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, &gv), &l) in drow.iter_mut().zip(grow).zip(lrow) {
                        *d += (gv - l.exp() * gsum) / temperature;
                    }
                }
            }
            &Op::Softmax { input, temperature } => {
                let cols = node.shape[1];
                let dx = acc(grads, input, g.len());
                for ((drow, grow), prow) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(node.value.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                        *d += p * (gv - dot) / temperature;
                    }
                }
            }
            Op::SoftTargetLoss {
                logits,
                targets,
                temperature,
                coeff,
                probs,
            } => {
                let batch = nodes[*logits].shape[0] as f64;
                let factor = g[0] * coeff / (temperature * batch);
                let dx = acc(grads, *logits, probs.len());
                for ((d, &p), &t) in dx.iter_mut().zip(probs).zip(targets) {
                    *d += factor * (p - t);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        input: usize,
        weight: usize,
        bias: usize,
        geom: Conv2dGeometry,
    ) {
        let nodes = &self.nodes;
        let xs = &nodes[input].shape;
        let [n, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let (o, k) = (nodes[weight].shape[0], nodes[weight].shape[2]);
        let (ho, wo) = (node.shape[2], node.shape[3]);
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        let xv = &nodes[input].value;
        let wv = &nodes[weight].value;
        let mut dx = nodes[input].needs_grad.then(|| vec![0.0; xv.len()]);
        let mut dw = nodes[weight].needs_grad.then(|| vec![0.0; wv.len()]);
        let mut db = nodes[bias].needs_grad.then(|| vec![0.0; o]);
        for ni in 0..n {
            for oi in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = g[((ni * o + oi) * ho + oh) * wo + ow];
                        if let Some(db) = db.as_mut() {
                            db[oi] += gv;
                        }
                        for ci in 0..c {
                            for kh in 0..k {
                                let ih = oh as isize * s + kh as isize - p;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = ow as isize * s + kw as isize - p;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + ih as usize) * w + iw as usize;
                                    let wi = ((oi * c + ci) * k + kh) * k + kw;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi] += gv * wv[wi];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[wi] += gv * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (j, d) in [(input, dx), (weight, dw), (bias, db)] {
            if let Some(d) = d {
                let slot = grads[j].get_or_insert_with(|| vec![0.0; d.len()]);
                slot.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}
