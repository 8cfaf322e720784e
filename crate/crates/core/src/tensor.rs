//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records one forward pass. Parameters enter the tape as leaves
//! through [`Tape::leaf`]; every other node is produced by a primitive op and
//! only refers to nodes recorded before it, so the node vector is already in
//! topological order. [`Tape::backward`] walks it in reverse and accumulates
//! gradients into the leaves that asked for them. The tape is meant to be
//! dropped after the backward pass.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major n-dimensional array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("1-d shape always matches")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("full shape")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies row `i` of the leading dimension.
    pub fn row(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
        .expect("row shape")
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyBatch("stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Exp,
    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    Log { floor: f64 },
    Square,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Sum over the last dimension, keeping it with size 1.
    SumLast(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// How an operand's elements map onto a broadcast output.
enum Mapping {
    Same,
    Scalar,
    /// Operand shape is a suffix of the output shape.
    Suffix(usize),
    General(Vec<usize>),
}

impl Mapping {
    fn new(out: &[usize], operand: &[usize]) -> Mapping {
        let n: usize = operand.iter().product();
        if operand == out {
            return Mapping::Same;
        }
        if n == 1 {
            return Mapping::Scalar;
        }
        if operand.len() <= out.len() && out[out.len() - operand.len()..] == *operand {
            return Mapping::Suffix(n);
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let offset = rank - operand.len();
        let mut acc = 1;
        for (k, &dim) in operand.iter().enumerate().rev() {
            strides[offset + k] = if dim == 1 { 0 } else { acc };
            acc *= dim;
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Mapping::General(map)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            Mapping::Same => i,
            Mapping::Scalar => 0,
            Mapping::Suffix(n) => i % n,
            Mapping::General(map) => map[i],
        }
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let db = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Generic elementwise entry point; `b` is required for binary kinds.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseOp::Unary(k), None) => Ok(self.unary(k, a)),
            (ElementwiseOp::Binary(_), None) => {
                Err(Error::invalid("binary elementwise op needs two operands"))
            }
            (ElementwiseOp::Unary(_), Some(_)) => {
                Err(Error::invalid("unary elementwise op takes one operand"))
            }
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: binary_name(op),
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let ma = Mapping::new(&out, sa);
        let mb = Mapping::new(&out, sb);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n: usize = out.iter().product();
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let value = match (&ma, &mb) {
            (Mapping::Same, Mapping::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(va[ma.get(i)], vb[mb.get(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, Op::Binary(op, a, b), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value: Vec<f64> = match op {
            UnaryOp::Neg => x.iter().map(|v| -v).collect(),
            UnaryOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Tanh => x.iter().map(|v| v.tanh()).collect(),
            UnaryOp::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryOp::LeakyRelu(s) => x.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            UnaryOp::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log { floor } => x.iter().map(|&v| v.max(floor).ln()).collect(),
            UnaryOp::Square => x.iter().map(|v| v * v).collect(),
            UnaryOp::Scale(c) => x.iter().map(|v| c * v).collect(),
            UnaryOp::AddScalar(c) => x.iter().map(|v| v + c).collect(),
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Unary(op, a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }

    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        self.unary(UnaryOp::Log { floor }, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = va[i * k + p];
                let brow = &vb[p * c..(p + 1) * c];
                row.iter_mut().zip(brow).for_each(|(o, &y)| *o += x * y);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r, c], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: r×k`, `b: c×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[0]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let arow = &va[i * k..(i + 1) * k];
            for j in 0..c {
                out.push(dot(arow, &vb[j * k..(j + 1) * k]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r, c], out, Op::MatMulT(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().unwrap_or(&1);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .chunks(last.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let mut out = shape;
        if let Some(l) = out.last_mut() {
            *l = 1;
        }
        let rg = self.rg(a);
        self.push(out, value, Op::SumLast(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Stride-1, zero-padded ("same") 2-d convolution.
    ///
    /// `input: B×C×H×W`, `weight: O×C×K×K` with odd `K`, `bias: O`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        let sb = &self.nodes[bias.0].shape;
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        if sb.as_slice() != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: sw,
                right: sb.clone(),
            });
        }
        let geo = ConvGeometry::new(&si, &sw);
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = vec![0.0; geo.batch * geo.out_ch * geo.h * geo.w];
        geo.for_each_tap(|o_idx, i_idx, w_idx| out[o_idx] += x[i_idx] * w[w_idx]);
        let plane = geo.h * geo.w;
        for (n, chunk) in out.chunks_mut(plane).enumerate() {
            let bo = b[n % geo.out_ch];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let shape = vec![geo.batch, geo.out_ch, geo.h, geo.w];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Calling it twice without a fresh tape adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                        None => node.grad = Some(g),
                    }
                }
                Op::Binary(kind, a, b) => self.back_binary(&mut grads, i, kind, a, b, &g),
                Op::Unary(kind, a) => {
                    if self.rg(a) {
                        let da = self.back_unary(i, kind, a, &g);
                        add_into(&mut grads[a.0], da);
                    }
                }
                Op::MatMul(a, b) => {
                    let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let c = self.nodes[b.0].shape[1];
                    if self.rg(a) {
                        // dA = dC · Bᵀ
                        let vb = &self.nodes[b.0].value;
                        let mut da = vec![0.0; r * k];
                        for ii in 0..r {
                            let grow = &g[ii * c..(ii + 1) * c];
                            for p in 0..k {
                                da[ii * k + p] = dot(grow, &vb[p * c..(p + 1) * c]);
                            }
                        }
                        add_into(&mut grads[a.0], da);
                    }
                    if self.rg(b) {
                        // dB = Aᵀ · dC
                        let va = &self.nodes[a.0].value;
                        let mut db = vec![0.0; k * c];
                        for ii in 0..r {
                            let grow = &g[ii * c..(ii + 1) * c];
                            for p in 0..k {
                                let x = va[ii * k + p];
                                db[p * c..(p + 1) * c]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, &y)| *d += x * y);
                            }
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let c = self.nodes[b.0].shape[0];
                    if self.rg(a) {
                        // dA = dC · B
                        let vb = &self.nodes[b.0].value;
                        let mut da = vec![0.0; r * k];
                        for ii in 0..r {
                            let drow = &mut da[ii * k..(ii + 1) * k];
                            for j in 0..c {
                                let gv = g[ii * c + j];
                                drow.iter_mut()
                                    .zip(&vb[j * k..(j + 1) * k])
                                    .for_each(|(d, &y)| *d += gv * y);
                            }
                        }
                        add_into(&mut grads[a.0], da);
                    }
                    if self.rg(b) {
                        // dB = dCᵀ · A
                        let va = &self.nodes[a.0].value;
                        let mut db = vec![0.0; c * k];
                        for ii in 0..r {
                            let arow = &va[ii * k..(ii + 1) * k];
                            for j in 0..c {
                                let gv = g[ii * c + j];
                                db[j * k..(j + 1) * k]
                                    .iter_mut()
                                    .zip(arow)
                                    .for_each(|(d, &x)| *d += gv * x);
                            }
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_into(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_into(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
                Op::SumLast(a) => {
                    let last = *self.nodes[a.0].shape.last().unwrap_or(&1);
                    let da = g
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v, last))
                        .collect();
                    add_into(&mut grads[a.0], da);
                }
                Op::Reshape(a) => add_into(&mut grads[a.0], g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let geo =
                        ConvGeometry::new(&self.nodes[input.0].shape, &self.nodes[weight.0].shape);
                    if self.rg(input) {
                        let w = &self.nodes[weight.0].value;
                        let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                        geo.for_each_tap(|o, ix, wx| dx[ix] += g[o] * w[wx]);
                        add_into(&mut grads[input.0], dx);
                    }
                    if self.rg(weight) {
                        let x = &self.nodes[input.0].value;
                        let mut dw = vec![0.0; self.nodes[weight.0].value.len()];
                        geo.for_each_tap(|o, ix, wx| dw[wx] += g[o] * x[ix]);
                        add_into(&mut grads[weight.0], dw);
                    }
                    if self.rg(bias) {
                        let plane = geo.h * geo.w;
                        let mut db = vec![0.0; geo.out_ch];
                        for (n, chunk) in g.chunks(plane).enumerate() {
                            db[n % geo.out_ch] += chunk.iter().sum::<f64>();
                        }
                        add_into(&mut grads[bias.0], db);
                    }
                }
            }
        }
        Ok(())
    }

    fn back_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        out: usize,
        kind: BinaryOp,
        a: Var,
        b: Var,
        g: &[f64],
    ) {
        let shape = &self.nodes[out].shape;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ma = Mapping::new(shape, &self.nodes[a.0].shape);
        let mb = Mapping::new(shape, &self.nodes[b.0].shape);
        if self.rg(a) {
            let mut da = vec![0.0; va.len()];
            for (i, &gi) in g.iter().enumerate() {
                let (ia, ib) = (ma.get(i), mb.get(i));
                da[ia] += match kind {
                    BinaryOp::Add | BinaryOp::Sub => gi,
                    BinaryOp::Mul => gi * vb[ib],
                    BinaryOp::Div => gi / vb[ib],
                };
            }
            add_into(&mut grads[a.0], da);
        }
        if self.rg(b) {
            let mut db = vec![0.0; vb.len()];
            for (i, &gi) in g.iter().enumerate() {
                let (ia, ib) = (ma.get(i), mb.get(i));
                db[ib] += match kind {
                    BinaryOp::Add => gi,
                    BinaryOp::Sub => -gi,
                    BinaryOp::Mul => gi * va[ia],
                    BinaryOp::Div => -gi * va[ia] / (vb[ib] * vb[ib]),
                };
            }
            add_into(&mut grads[b.0], db);
        }
    }

    fn back_unary(&self, out: usize, kind: UnaryOp, a: Var, g: &[f64]) -> Vec<f64> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[out].value;
        let it = g.iter().zip(x).zip(y);
        match kind {
            UnaryOp::Neg => g.iter().map(|v| -v).collect(),
            UnaryOp::Sigmoid => it.map(|((g, _), y)| g * y * (1.0 - y)).collect(),
            UnaryOp::Tanh => it.map(|((g, _), y)| g * (1.0 - y * y)).collect(),
            UnaryOp::Relu => it.map(|((g, x), _)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            UnaryOp::LeakyRelu(s) => it
                .map(|((g, x), _)| if *x > 0.0 { *g } else { s * g })
                .collect(),
            UnaryOp::Exp => it.map(|((g, _), y)| g * y).collect(),
            UnaryOp::Log { floor } => it
                .map(|((g, x), _)| if *x > floor { g / x } else { 0.0 })
                .collect(),
            UnaryOp::Square => it.map(|((g, x), _)| 2.0 * g * x).collect(),
            UnaryOp::Scale(c) => g.iter().map(|v| c * v).collect(),
            UnaryOp::AddScalar(_) => g.to_vec(),
        }
    }
}

/// Selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Binary(BinaryOp),
    Unary(UnaryOp),
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize]) -> Self {
        Self {
            batch: input[0],
            in_ch: input[1],
            out_ch: weight[0],
            h: input[2],
            w: input[3],
            k: weight[2],
        }
    }

    /// Visits every (output, input, weight) index triple that contributes.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.k / 2) as isize;
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        for n in 0..self.batch {
            for o in 0..self.out_ch {
                for c in 0..self.in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w_idx = ((o * self.in_ch + c) * k + ky) * k + kx;
                            for y in 0..h {
                                let iy = y + ky as isize - pad;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for x in 0..w {
                                    let ix = x + kx as isize - pad;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    let o_idx = ((n * self.out_ch + o) * self.h + y as usize)
                                        * self.w
                                        + x as usize;
                                    let i_idx = ((n * self.in_ch + c) * self.h + iy as usize)
                                        * self.w
                                        + ix as usize;
                                    f(o_idx, i_idx, w_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be > 0")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    let analytic = if tape.rg(out) {
        tape.backward(out)?;
        tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn hadamard_and_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0, 3.0, 4.0]));
        let m = tape.constant(t(&[1.0, 0.0, 1.0, 0.0]));
        let y = tape.mul(a, m).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0, 3.0, 0.0]);

        let a = tape.constant(t(&[1.0, 1.0]));
        let z = tape.constant(t(&[0.0, 0.0]));
        let y = tape.add(a, z).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0]);
    }

    #[test]
    fn scalar_product_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[0.5]).with_grad());
        let b = tape.leaf(&t(&[0.5]).with_grad());
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = tape.mul(a, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_trailing_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap().with_grad());
        let b = tape.leaf(&t(&[10.0, 20.0, 30.0]).with_grad());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn general_broadcast_gradient() {
        // (2,1) ⊙ (1,3) exercises the general index map on both sides.
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![2, 1], vec![1., 2.]).unwrap().with_grad());
        let b = tape.leaf(&Tensor::new(vec![1, 3], vec![3., 4., 5.]).unwrap().with_grad());
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert_eq!(tape.value(y), &[3., 4., 5., 6., 8., 10.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[12.0, 12.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let m = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3., 4.]);

        let a = tape.constant(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3., 4.]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[11.0]);

        let a = tape.leaf(&Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap().with_grad());
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // d/dA_ik sum(AB) = sum_j B_kj = 2 for a 2×2 all-ones B.
        assert_eq!(tape.grad(a).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3.0]).with_grad());
        let y = tape.unary(UnaryOp::Square, x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[4]).with_grad());
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[0.0]).with_grad());
        let s = tape.sigmoid(x);
        let y = tape.log(s, 1e-12);
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 2.0]).with_grad());
        let y = tape.scale(x, 3.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor::from_vec((0..8).map(|i| (i as f64 * 0.37).sin()).collect());
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.unary(UnaryOp::Square, v);
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let err = finite_diff_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-5)
            .unwrap();
        assert_eq!(err, 0.0);

        let bad = finite_diff_check(|_, v| Ok(v), &x, 1e-5);
        assert!(matches!(bad, Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv2d_gradients() {
        let input = Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect()).unwrap();
        let weight = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
        let bias = t(&[0.1, -0.2, 0.3]);
        let loss = |tape: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.conv2d(x, w, b)?;
            let y = tape.tanh(y);
            Ok(tape.sum(y))
        };
        let err = finite_diff_check(
            |tape, x| {
                let w = tape.constant(weight.clone());
                let b = tape.constant(bias.clone());
                loss(tape, x, w, b)
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input {err}");
        let err = finite_diff_check(
            |tape, w| {
                let x = tape.constant(input.clone());
                let b = tape.constant(bias.clone());
                loss(tape, x, w, b)
            },
            &weight,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "weight {err}");
        let err = finite_diff_check(
            |tape, b| {
                let x = tape.constant(input.clone());
                let w = tape.constant(weight.clone());
                loss(tape, x, w, b)
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bias {err}");
    }

    #[test]
    fn ops_gradcheck() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| 0.3 + (i as f64 * 1.3).cos()).collect()).unwrap();
        let w = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let y = tape.matmul_t(v, wv)?;
                let e = tape.unary(UnaryOp::Exp, y);
                let s = tape.sum_last(e);
                let l = tape.log(s, 1e-12);
                let r = tape.reshape(v, vec![4, 3])?;
                let q = tape.unary(UnaryOp::LeakyRelu(0.2), r);
                let q = tape.mean(q);
                let a = tape.mean(l);
                let vv = tape.sigmoid(v);
                let ratio = tape.div(vv, v)?;
                let ratio = tape.sum(ratio);
                let out = tape.add(a, q)?;
                tape.add(out, ratio)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
