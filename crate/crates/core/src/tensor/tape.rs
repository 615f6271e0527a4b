use std::cell::{Ref, RefCell};
use std::fmt;

use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AffineCols { x: usize, scale: Vec<f64> },
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Transpose(usize),
    HCat(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    MulCol { x: usize, a: usize, col: usize },
    Reshape(usize),
    Custom {
        name: &'static str,
        inputs: Vec<usize>,
        backward: BackwardFn,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AffineCols { .. } => "affine_cols",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::HCat(..) => "hcat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::MulCol { .. } => "mul_col",
            Op::Reshape(..) => "reshape",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// One tape belongs to one forward/backward pass. Node ids are assigned in
/// creation order, so inputs always precede the nodes that consume them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// `backward(grad_out, input_values, output_value)` returns one optional
    /// gradient per input, in input order.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        self.push(
            value,
            Op::Custom {
                name,
                inputs: ids,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn hcat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("hcat of zero tensors"));
        };
        let n = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim(format!(
                    "hcat expects [{n}, _] parts, got {s:?}"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for i in 0..n {
                    data[i * total + off..i * total + off + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                off += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::new(&[n, total], data)?, Op::HCat(ids), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (input, gi) in backprop(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Op kinds in node order; handy when debugging a graph.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.kind()).collect()
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    let like = |i: usize, data: Vec<f64>| Tensor {
        shape: nodes[i].value.shape.clone(),
        data,
    };
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (n, p) = val(*a).dims2();
            let (_, q) = val(*b).dims2();
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let bt = transpose_raw(val(*b).data(), p, q);
                out.push((*a, like(*a, matmul_raw(gd, &bt, n, q, p))));
            }
            if nodes[*b].requires_grad {
                let at = transpose_raw(val(*a).data(), n, p);
                out.push((*b, like(*b, matmul_raw(&at, gd, p, n, q))));
            }
            out
        }
        Op::AddBias(x, b) => {
            let q = val(*b).len();
            let mut gb = vec![0.0; q];
            for row in gd.chunks(q) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![(*x, g.clone()), (*b, like(*b, gb))]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let ad = val(*a).data();
            let bd = val(*b).data();
            vec![
                (*a, like(*a, gd.iter().zip(bd).map(|(g, b)| g * b).collect())),
                (*b, like(*b, gd.iter().zip(ad).map(|(g, a)| g * a).collect())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::AffineCols { x, scale } => {
            let m = scale.len();
            let data = gd
                .iter()
                .enumerate()
                .map(|(k, v)| v * scale[k % m])
                .collect();
            vec![(*x, like(*x, data))]
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            let data = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
            vec![(*x, like(*x, data))]
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            let data = gd
                .iter()
                .zip(xd)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![(*x, like(*x, data))]
        }
        Op::Exp(x) => {
            let y = node.value.data();
            vec![(*x, like(*x, gd.iter().zip(y).map(|(g, y)| g * y).collect()))]
        }
        Op::Abs(x) => {
            let xd = val(*x).data();
            let data = gd
                .iter()
                .zip(xd)
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*x, like(*x, data))]
        }
        Op::SoftmaxRows(x) => {
            let y = node.value.data();
            let m = *node.value.shape().last().unwrap();
            let mut data = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(m).zip(gd.chunks(m)).zip(data.chunks_mut(m)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![(*x, like(*x, data))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = val(*gain).len();
            let gaind = val(*gain).data();
            let mut gx = vec![0.0; xhat.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for (r, ((xh, gr), out)) in xhat
                .chunks(d)
                .zip(gd.chunks(d))
                .zip(gx.chunks_mut(d))
                .enumerate()
            {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let gy = gr[j] * gaind[j];
                    s1 += gy;
                    s2 += gy * xh[j];
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
                let k = inv_std[r] / d as f64;
                for j in 0..d {
                    let gy = gr[j] * gaind[j];
                    out[j] = k * (d as f64 * gy - s1 - xh[j] * s2);
                }
            }
            vec![
                (*x, like(*x, gx)),
                (*gain, like(*gain, ggain)),
                (*bias, like(*bias, gbias)),
            ]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
        Op::Transpose(x) => {
            let (n, m) = val(*x).dims2();
            vec![(*x, like(*x, transpose_raw(gd, m, n)))]
        }
        Op::HCat(ids) => {
            let (n, total) = g.dims2();
            let mut off = 0;
            let mut out = Vec::with_capacity(ids.len());
            for &id in ids {
                let w = val(id).dims2().1;
                let mut part = vec![0.0; n * w];
                for i in 0..n {
                    part[i * w..(i + 1) * w]
                        .copy_from_slice(&gd[i * total + off..i * total + off + w]);
                }
                out.push((id, like(id, part)));
                off += w;
            }
            out
        }
        Op::SliceCols { x, start } => {
            let (n, m) = val(*x).dims2();
            let w = g.dims2().1;
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                data[i * m + start..i * m + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![(*x, like(*x, data))]
        }
        Op::GatherRows { x, idx } => {
            let m = val(*x).dims2().1;
            let mut data = vec![0.0; val(*x).len()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..m {
                    data[src * m + j] += gd[r * m + j];
                }
            }
            vec![(*x, like(*x, data))]
        }
        Op::MulCol { x, a, col } => {
            let (n, c) = val(*x).dims2();
            let (_, na) = val(*a).dims2();
            let xd = val(*x).data();
            let ad = val(*a).data();
            let mut gx = vec![0.0; n * c];
            let mut ga = vec![0.0; n * na];
            for i in 0..n {
                let w = ad[i * na + col];
                let mut acc = 0.0;
                for j in 0..c {
                    gx[i * c + j] = gd[i * c + j] * w;
                    acc += gd[i * c + j] * xd[i * c + j];
                }
                ga[i * na + col] = acc;
            }
            vec![(*x, like(*x, gx)), (*a, like(*a, ga))]
        }
        Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
        Op::Custom {
            inputs, backward, ..
        } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
            backward(g, &vals, &node.value)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &id)| gi.map(|t| (id, t)))
                .collect()
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().shape()[0]
    }

    pub fn cols(&self) -> usize {
        let v = self.value();
        *v.shape().last().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, w: Var<'t>) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!("matmul of {xs:?} and {ws:?}")));
        }
        let data = matmul_raw(self.value().data(), w.value().data(), xs[0], xs[1], ws[1]);
        let t = Tensor::new(&[xs[0], ws[1]], data)?;
        Ok(self.binary(w, Op::MatMul(self.id, w.id), t))
    }

    pub fn add_bias(&self, b: Var<'t>) -> Result<Var<'t>> {
        let (xs, bs) = (self.shape(), b.shape());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::dim(format!("bias {bs:?} does not fit {xs:?}")));
        }
        let mut out = self.to_tensor();
        {
            let bv = b.value();
            for row in out.data_mut().chunks_mut(xs[1]) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        Ok(self.binary(b, Op::AddBias(self.id, b.id), out))
    }

    /// `x·w + b` for `x[n×p]`, `w[p×q]`, `b[q]`.
    pub fn linear(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_bias(b)
    }

    fn zip_same(&self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "{what} of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, Op::Add(self.id, other.id), t))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), t))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), t))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let t = self.value().map(|v| v * c);
        self.unary(Op::Scale(self.id, c), t)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let t = self.value().map(|v| v + c);
        self.unary(Op::AddScalar(self.id), t)
    }

    /// Per-column affine map `y[i,j] = x[i,j]·scale[j] + offset[j]` with
    /// constant coefficients.
    pub fn affine_cols(&self, scale: &[f64], offset: &[f64]) -> Result<Var<'t>> {
        let m = self.cols();
        if scale.len() != m || offset.len() != m {
            return Err(Error::dim(format!(
                "affine_cols coefficients of length {}/{} for {m} columns",
                scale.len(),
                offset.len()
            )));
        }
        let data = self
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * scale[k % m] + offset[k % m])
            .collect();
        let t = Tensor::new(&self.shape(), data)?;
        Ok(self.unary(
            Op::AffineCols {
                x: self.id,
                scale: scale.to_vec(),
            },
            t,
        ))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let t = self.value().map(super::sigmoid);
        self.unary(Op::Sigmoid(self.id), t)
    }

    pub fn relu(&self) -> Var<'t> {
        let t = self.value().map(|v| v.max(0.0));
        self.unary(Op::Relu(self.id), t)
    }

    pub fn exp(&self) -> Var<'t> {
        let t = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), t)
    }

    pub fn abs(&self) -> Var<'t> {
        let t = self.value().map(f64::abs);
        self.unary(Op::Abs(self.id), t)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&self) -> Var<'t> {
        let t = softmax_last(&self.value());
        self.unary(Op::SoftmaxRows(self.id), t)
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xs = self.shape();
        let d = gain.value().len();
        if xs.len() != 2 || xs[1] != d || bias.value().len() != d {
            return Err(Error::dim(format!(
                "layer_norm of {xs:?} with gain/bias of length {d}/{}",
                bias.value().len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (n, _) = (xs[0], xs[1]);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        {
            let xv = self.value();
            let gv = gain.value();
            let bv = bias.value();
            for row in xv.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            t,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose of {s:?}")));
        }
        let t = Tensor::new(&[s[1], s[0]], transpose_raw(self.value().data(), s[0], s[1]))?;
        Ok(self.unary(Op::Transpose(self.id), t))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim(format!("columns {start}..{} of {s:?}", start + len)));
        }
        let (n, m) = (s[0], s[1]);
        let mut data = Vec::with_capacity(n * len);
        {
            let v = self.value();
            for i in 0..n {
                data.extend_from_slice(&v.data()[i * m + start..i * m + start + len]);
            }
        }
        let t = Tensor::new(&[n, len], data)?;
        Ok(self.unary(Op::SliceCols { x: self.id, start }, t))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::dim(format!("gather of {} rows from {s:?}", idx.len())));
        }
        let m = s[1];
        let mut data = Vec::with_capacity(idx.len() * m);
        {
            let v = self.value();
            for &i in idx {
                data.extend_from_slice(&v.data()[i * m..(i + 1) * m]);
            }
        }
        let t = Tensor::new(&[idx.len(), m], data)?;
        Ok(self.unary(
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            t,
        ))
    }

    /// Scales row `i` of `self[n×c]` by `a[i, col]`.
    pub fn mul_col(&self, a: Var<'t>, col: usize) -> Result<Var<'t>> {
        let (xs, as_) = (self.shape(), a.shape());
        if xs.len() != 2 || as_.len() != 2 || xs[0] != as_[0] || col >= as_[1] {
            return Err(Error::dim(format!("mul_col {xs:?} by column {col} of {as_:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let na = as_[1];
        let mut data = self.value().data().to_vec();
        {
            let av = a.value();
            for i in 0..n {
                let w = av.data()[i * na + col];
                for v in &mut data[i * c..(i + 1) * c] {
                    *v *= w;
                }
            }
        }
        let t = Tensor::new(&xs, data)?;
        Ok(self.binary(
            a,
            Op::MulCol {
                x: self.id,
                a: a.id,
                col,
            },
            t,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.to_tensor().reshaped(shape)?;
        Ok(self.unary(Op::Reshape(self.id), t))
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let m = *x.shape().last().unwrap();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}
