//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The one non-standard piece is [`Tape::apply_custom`]: an elementwise node
//! whose forward output is `F(x)` but whose backward pass multiplies the
//! incoming gradient by `B(x)` evaluated at the *original* input, never by
//! the analytic derivative of `F`. This is the mechanism that lets a forward
//! quantizer be paired with an arbitrary backward quantizer. The multiplier
//! is evaluated eagerly during the forward pass, so the backward sweep never
//! touches `F` at all.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Elementwise forward map plus the backward multiplier substituted for its
/// derivative.
pub struct CustomGradSpec<'a> {
    pub forward: &'a dyn Fn(f64) -> f64,
    pub backward: &'a dyn Fn(f64) -> f64,
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Sum(VarId),
    Tanh(VarId),
    Relu(VarId),
    Reshape(VarId),
    /// Broadcast bias add over the channel axis: `[N,F]+[F]` or `[N,C,H,W]+[C]`.
    AddBias(VarId, VarId),
    Matmul(VarId, VarId),
    Conv2d {
        x: VarId,
        k: VarId,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<u32>,
    },
    SoftmaxCrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        softmax: Vec<f64>,
    },
    /// Forward `F(x)`, backward multiplier `B(x)` precomputed at the input.
    Custom {
        x: VarId,
        mult: Vec<f64>,
    },
    /// 8-bit cyclic accumulator wrap; straight-through backward.
    Wrap(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Single-threaded per instance; independent tapes may run
/// concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Tensor {
        self.grads[id.0].take().expect("no gradient recorded for variable")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, op: Op) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        VarId(nodes.len() - 1)
    }

    pub fn var(&self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn add(&self, a: VarId, b: VarId) -> Result<VarId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::Dimension(format!(
                    "add: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::Dimension(format!(
                    "mul: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&self, x: VarId, c: f64) -> VarId {
        let value = self.nodes.borrow()[x.0].value.map(|v| c * v);
        self.push(value, Op::Scale(x, c))
    }

    pub fn sum(&self, x: VarId) -> VarId {
        let s: f64 = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn tanh(&self, x: VarId) -> VarId {
        let value = self.nodes.borrow()[x.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&self, x: VarId) -> VarId {
        let value = self.nodes.borrow()[x.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn reshape(&self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.nodes.borrow()[x.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Flatten `[N, ...]` to `[N, rest]`.
    pub fn flatten(&self, x: VarId) -> Result<VarId> {
        let shape = {
            let nodes = self.nodes.borrow();
            let s = nodes[x.0].value.shape();
            vec![s[0], s[1..].iter().product()]
        };
        self.reshape(x, shape)
    }

    pub fn add_bias(&self, x: VarId, b: VarId) -> Result<VarId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
            let c = tb.numel();
            match tx.shape() {
                [_, f] if *f == c => {
                    let data = tx
                        .data()
                        .chunks_exact(c)
                        .flat_map(|row| row.iter().zip(tb.data()).map(|(x, b)| x + b))
                        .collect();
                    Tensor::new(tx.shape().to_vec(), data)?
                }
                [_, ch, h, w] if *ch == c => {
                    let hw = h * w;
                    let mut data = tx.data().to_vec();
                    for chunk in data.chunks_exact_mut(c * hw) {
                        for (ci, sub) in chunk.chunks_exact_mut(hw).enumerate() {
                            let bv = tb.data()[ci];
                            for v in sub {
                                *v += bv;
                            }
                        }
                    }
                    Tensor::new(tx.shape().to_vec(), data)?
                }
                s => {
                    return Err(Error::Dimension(format!(
                        "add_bias: input {:?} vs bias len {}",
                        s, c
                    )))
                }
            }
        };
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
                return Err(Error::Dimension(format!(
                    "matmul expects rank-2 tensors, got {:?} × {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            };
            if k != k2 {
                return Err(Error::Dimension(format!(
                    "matmul: {:?} × {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut out = vec![0.0; m * n];
            matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Cross-correlation of `[N,C,H,W]` with kernels `[O,C,kh,kw]`.
    pub fn conv2d(&self, x: VarId, k: VarId, stride: usize, padding: usize) -> Result<VarId> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
            conv2d_forward(tx, tk, stride, padding)?
        };
        Ok(self.push(value, Op::Conv2d { x, k, stride, padding, cols }))
    }

    /// 2×2 max pooling, stride 2, floor semantics on odd dims.
    pub fn max_pool2(&self, x: VarId) -> Result<VarId> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let [n, c, h, w] = tx.shape() else {
                return Err(Error::Dimension(format!("max_pool2: rank-4 input required, got {:?}", tx.shape())));
            };
            let (n, c, h, w) = (*n, *c, *h, *w);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; n * c * oh * ow];
            let mut arg = vec![0u32; out.len()];
            let xd = tx.data();
            for nc in 0..n * c {
                let base = nc * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + (2 * i + dy) * w + 2 * j + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    bi = idx;
                                }
                            }
                        }
                        let o = nc * oh * ow + i * ow + j;
                        out[o] = best;
                        arg[o] = bi as u32;
                    }
                }
            }
            (Tensor::new(vec![n, c, oh, ow], out)?, arg)
        };
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (value, softmax) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let [n, c] = tl.shape() else {
                return Err(Error::Dimension(format!("softmax_cross_entropy: rank-2 logits required, got {:?}", tl.shape())));
            };
            let (n, c) = (*n, *c);
            if labels.len() != n {
                return Err(Error::Dimension(format!(
                    "softmax_cross_entropy: {} logits rows vs {} labels",
                    n,
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Index(format!(
                    "label {} out of range for {} classes",
                    bad, c
                )));
            }
            let mut soft = vec![0.0; n * c];
            let mut loss = 0.0;
            for (i, row) in tl.data().chunks_exact(c).enumerate() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    soft[i * c + j] = e;
                    z += e;
                }
                for v in &mut soft[i * c..(i + 1) * c] {
                    *v /= z;
                }
                // stable −log softmax at the true class
                loss += mx + z.ln() - row[labels[i]];
            }
            (Tensor::scalar(loss / n as f64), soft)
        };
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), softmax },
        ))
    }

    /// Elementwise `F(x)` forward with backward multiplier `B(x)`.
    pub fn apply_custom(&self, x: VarId, spec: CustomGradSpec<'_>) -> VarId {
        let (value, mult) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let value = tx.map(spec.forward);
            let mult = tx.data().iter().map(|&v| (spec.backward)(v)).collect();
            (value, mult)
        };
        self.push(value, Op::Custom { x, mult })
    }

    /// Cyclic 8-bit accumulator wrap `((v+128) mod 256) − 128`, elementwise,
    /// with straight-through backward.
    pub fn wrap_i8(&self, x: VarId) -> VarId {
        let value = self.nodes.borrow()[x.0].value.map(crate::nn::wrap_value_i8);
        self.push(value, Op::Wrap(x))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &nodes, g.clone());
                    accumulate(&mut grads, *b, &nodes, g.clone());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = elemwise_prod(g.data(), tb.data(), ta.shape());
                    let gb = elemwise_prod(g.data(), ta.data(), tb.shape());
                    accumulate(&mut grads, *a, &nodes, ga);
                    accumulate(&mut grads, *b, &nodes, gb);
                }
                Op::Scale(x, c) => {
                    let gx = g.map(|v| v * c);
                    accumulate(&mut grads, *x, &nodes, gx);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let shape = nodes[x.0].value.shape().to_vec();
                    let gx = Tensor::new(shape.clone(), vec![gv; shape.iter().product()]).unwrap();
                    accumulate(&mut grads, *x, &nodes, gx);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    let gx = Tensor::new(y.shape().to_vec(), data).unwrap();
                    accumulate(&mut grads, *x, &nodes, gx);
                }
                Op::Relu(x) => {
                    let tx = &nodes[x.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    let gx = Tensor::new(tx.shape().to_vec(), data).unwrap();
                    accumulate(&mut grads, *x, &nodes, gx);
                }
                Op::Reshape(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let gx = Tensor::new(shape, g.data().to_vec()).unwrap();
                    accumulate(&mut grads, *x, &nodes, gx);
                }
                Op::AddBias(x, b) => {
                    let tb = &nodes[b.0].value;
                    let c = tb.numel();
                    let tx = &nodes[x.0].value;
                    let mut gb = vec![0.0; c];
                    match tx.shape() {
                        [_, _f] => {
                            for row in g.data().chunks_exact(c) {
                                for (acc, &gv) in gb.iter_mut().zip(row) {
                                    *acc += gv;
                                }
                            }
                        }
                        [_, _c, h, w] => {
                            let hw = h * w;
                            for chunk in g.data().chunks_exact(c * hw) {
                                for (ci, sub) in chunk.chunks_exact(hw).enumerate() {
                                    gb[ci] += sub.iter().sum::<f64>();
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    accumulate(&mut grads, *x, &nodes, g.clone());
                    accumulate(
                        &mut grads,
                        *b,
                        &nodes,
                        Tensor::new(tb.shape().to_vec(), gb).unwrap(),
                    );
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), tb.data(), m, n, k, &mut ga);
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(ta.data(), g.data(), m, k, n, &mut gb);
                    accumulate(&mut grads, *a, &nodes, Tensor::new(vec![m, k], ga).unwrap());
                    accumulate(&mut grads, *b, &nodes, Tensor::new(vec![k, n], gb).unwrap());
                }
                Op::Conv2d { x, k, stride, padding, cols } => {
                    let (gx, gk) = conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[k.0].value,
                        *stride,
                        *padding,
                        cols,
                        &g,
                    );
                    accumulate(&mut grads, *x, &nodes, gx);
                    accumulate(&mut grads, *k, &nodes, gk);
                }
                Op::MaxPool2 { x, argmax } => {
                    let tx = &nodes[x.0].value;
                    let mut gx = vec![0.0; tx.numel()];
                    for (&gv, &src) in g.data().iter().zip(argmax.iter()) {
                        gx[src as usize] += gv;
                    }
                    accumulate(&mut grads, *x, &nodes, Tensor::new(tx.shape().to_vec(), gx).unwrap());
                }
                Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
                    let gv = g.item();
                    let tl = &nodes[logits.0].value;
                    let n = tl.shape()[0];
                    let c = tl.shape()[1];
                    let scale = gv / n as f64;
                    let mut gl = softmax.iter().map(|&s| s * scale).collect::<Vec<_>>();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * c + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, &nodes, Tensor::new(vec![n, c], gl).unwrap());
                }
                Op::Custom { x, mult } => {
                    let data = g.data().iter().zip(mult).map(|(&gv, &m)| gv * m).collect();
                    let shape = nodes[x.0].value.shape().to_vec();
                    accumulate(&mut grads, *x, &nodes, Tensor::new(shape, data).unwrap());
                }
                Op::Wrap(x) => {
                    accumulate(&mut grads, *x, &nodes, g.clone());
                }
            }
        }
        Gradients { grads }
    }
}

fn elemwise_prod(a: &[f64], b: &[f64], shape: &[usize]) -> Tensor {
    let data = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, _nodes: &[Node], g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let [n, c, h, w] = x.shape() else {
        return Err(Error::Dimension(format!("conv2d: rank-4 input required, got {:?}", x.shape())));
    };
    let [o, kc, kh, kw] = k.shape() else {
        return Err(Error::Dimension(format!("conv2d: rank-4 kernel required, got {:?}", k.shape())));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    let (o, kc, kh, kw) = (*o, *kc, *kh, *kw);
    if kc != c {
        return Err(Error::Dimension(format!("conv2d: {} input channels vs kernel {}", c, kc)));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {}×{} larger than padded input {}×{}",
            kh,
            kw,
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let ck = c * kh * kw;
    let rows = n * oh * ow;
    let mut cols = vec![0.0; rows * ck];
    let xd = x.data();
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((ni * oh + i) * ow + j) * ck;
                for ci in 0..c {
                    let xc = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let y = (i * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = xc + y as usize * w;
                        let crow = row + ci * kh * kw + ky * kw;
                        for kx in 0..kw {
                            let xcol = (j * stride + kx) as isize - padding as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            cols[crow + kx] = xd[xrow + xcol as usize];
                        }
                    }
                }
            }
        }
    }
    // y[rows×o] = cols · kᵀ, then transpose per image to channel-major.
    let mut y = vec![0.0; rows * o];
    matmul_nt_acc(&cols, k.data(), rows, ck, o, &mut y);
    let mut out = vec![0.0; n * o * oh * ow];
    let hw = oh * ow;
    for ni in 0..n {
        for p in 0..hw {
            let yrow = (ni * hw + p) * o;
            for oi in 0..o {
                out[(ni * o + oi) * hw + p] = y[yrow + oi];
            }
        }
    }
    Ok((Tensor::new(vec![n, o, oh, ow], out)?, cols))
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
    cols: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let ck = c * kh * kw;
    let rows = n * oh * ow;
    let hw = oh * ow;

    // transpose incoming gradient back to [rows × o]
    let gd = g.data();
    let mut gy = vec![0.0; rows * o];
    for ni in 0..n {
        for oi in 0..o {
            let src = (ni * o + oi) * hw;
            for p in 0..hw {
                gy[(ni * hw + p) * o + oi] = gd[src + p];
            }
        }
    }

    let mut gk = vec![0.0; o * ck];
    // gk[o×ck] += gyᵀ · cols
    matmul_tn_acc(&gy, cols, rows, o, ck, &mut gk);

    let mut gcols = vec![0.0; rows * ck];
    matmul_acc(&gy, k.data(), rows, o, ck, &mut gcols);

    // col2im scatter
    let mut gx = vec![0.0; x.numel()];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = ((ni * oh + i) * ow + j) * ck;
                for ci in 0..c {
                    let xc = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let y = (i * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = xc + y as usize * w;
                        let crow = row + ci * kh * kw + ky * kw;
                        for kx in 0..kw {
                            let xcol = (j * stride + kx) as isize - padding as isize;
                            if xcol < 0 || xcol >= w as isize {
                                continue;
                            }
                            gx[xrow + xcol as usize] += gcols[crow + kx];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
    )
}

/// Max over coordinates of `|autodiff − central difference| / (|cd| + eps)`,
/// with per-coordinate step `1e-5·(1+|x_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&Tape, VarId) -> VarId,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = f(&tape, xv);
    let grads = tape.backward(out);
    let auto = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let h = 1e-5 * (1.0 + x.data()[i].abs());
        let eval = |v: f64| -> f64 {
            let mut xp = x.clone();
            xp.data_mut()[i] = v;
            let t = Tape::new();
            let id = t.var(xp);
            let o = f(&t, id);
            let out = t.value(o).item();
            out
        };
        let cd = (eval(x.data()[i] + h) - eval(x.data()[i] - h)) / (2.0 * h);
        let rel = (auto.data()[i] - cd).abs() / (cd.abs() + eps);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let tape = Tape::new();
        let a = tape.var(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.var(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let tape = Tape::new();
        let a = tape.var(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.var(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&[3, 3], &mut rng);
        let b = rand_tensor(&[3, 3], &mut rng);
        let err = grad_check(
            |t, av| {
                let bv = t.var(b.clone());
                let c = t.matmul(av, bv).unwrap();
                t.sum(c)
            },
            &a,
            1e-8,
        );
        assert!(err < 1e-6, "matmul grad error {err}");
    }

    #[test]
    fn conv2d_sum_kernel() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let k = tape.var(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0; // center tap
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let kv = tape.var(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[1, 1, 3, 3]));
        let k = tape.var(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn conv2d_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let k0 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let err = grad_check(
            |t, kv| {
                let xv = t.var(x.clone());
                let y = t.conv2d(xv, kv, 1, 1).unwrap();
                t.sum(y)
            },
            &k0,
            1e-8,
        );
        assert!(err < 1e-5, "conv2d kernel grad error {err}");
    }

    #[test]
    fn cross_entropy_uniform() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::zeros(&[1, 3]));
        assert!(tape.softmax_cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_tensor(&[2, 3], &mut rng);
        let err = grad_check(
            |t, lv| t.softmax_cross_entropy(lv, &[1, 2]).unwrap(),
            &logits,
            1e-8,
        );
        assert!(err < 1e-6, "cross entropy grad error {err}");
    }

    #[test]
    fn custom_sign_with_unit_backward() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![0.3, -2.0]));
        let y = tape.apply_custom(
            x,
            CustomGradSpec {
                forward: &|w| if w < 0.0 { -1.0 } else { 1.0 },
                backward: &|_| 1.0,
            },
        );
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn custom_identity_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[5], &mut rng);
        let err = grad_check(
            |t, xv| {
                let y = t.apply_custom(
                    xv,
                    CustomGradSpec { forward: &|w| w, backward: &|_| 1.0 },
                );
                t.sum(y)
            },
            &x,
            1e-8,
        );
        assert!(err < 1e-9);
    }

    #[test]
    fn custom_ss_backward_at_zero_is_mu() {
        let mu = 5.0;
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![0.0]));
        let y = tape.apply_custom(
            x,
            CustomGradSpec {
                forward: &|w| crate::quantizers::ss_forward(w, mu),
                backward: &|w| crate::quantizers::ss_backward(w, mu),
            },
        );
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert!((grads.get(x).unwrap().data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn custom_with_analytic_derivative_matches_builtin_autodiff() {
        // B = tanh' agrees with the tape's own tanh backward to 1e-10
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[16], &mut rng);

        let t1 = Tape::new();
        let x1 = t1.var(x.clone());
        let y1 = t1.tanh(x1);
        let s1 = t1.sum(y1);
        let g1 = t1.backward(s1);

        let t2 = Tape::new();
        let x2 = t2.var(x.clone());
        let y2 = t2.apply_custom(
            x2,
            CustomGradSpec {
                forward: &f64::tanh,
                backward: &|w| 1.0 - w.tanh().powi(2),
            },
        );
        let s2 = t2.sum(y2);
        let g2 = t2.backward(s2);

        for (a, b) in g1.get(x1).unwrap().data().iter().zip(g2.get(x2).unwrap().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&[10], &mut rng);
        let err = grad_check(
            |t, xv| {
                let y = t.mul(xv, xv).unwrap();
                t.sum(y)
            },
            &x,
            1e-8,
        );
        assert!(err < 1e-7, "sum of squares grad error {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |t, xv| {
                let z = t.scale(xv, 0.0);
                t.sum(z)
            },
            &x,
            1e-8,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_mlp_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = rand_tensor(&[4, 3], &mut rng);
        let x = rand_tensor(&[2, 4], &mut rng);
        let err = grad_check(
            |t, wv| {
                let xv = t.var(x.clone());
                let logits = t.matmul(xv, wv).unwrap();
                t.softmax_cross_entropy(logits, &[0, 2]).unwrap()
            },
            &w,
            1e-8,
        );
        assert!(err < 1e-5, "pipeline grad error {err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let x = rand_tensor(&[4, 4], &mut rng);
            let w = rand_tensor(&[4, 2], &mut rng);
            let t = Tape::new();
            let xv = t.var(x);
            let wv = t.var(w);
            let h = t.matmul(xv, wv).unwrap();
            let r = t.relu(h);
            let loss = t.softmax_cross_entropy(r, &[0, 1, 0, 1]).unwrap();
            let grads = t.backward(loss);
            let lbits = t.value(loss).item().to_bits();
            let gbits = grads.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            (lbits, gbits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap());
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
