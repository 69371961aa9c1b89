//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Parents always
//! precede children, so walking node ids downward from the output is a
//! reverse topological order. A tape supports a single backward pass.
//!
//! Subgradient conventions: `relu` has derivative 0 at 0; max-type
//! reductions route the whole gradient to the lowest index among ties.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower bound on the norm used by [`Var::l2_normalize`].
pub const L2_GUARD: f64 = 1e-12;

/// Compressed neighbor lists: row `i` aggregates over `get(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighborhoods {
    /// Every list must be non-empty and in range of `n`.
    pub fn from_lists(lists: &[Vec<usize>], n: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (i, l) in lists.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::invalid(format!("neighborhood {i} is empty")));
            }
            if l.iter().any(|&j| j >= n) {
                return Err(Error::invalid(format!("neighborhood {i} out of range")));
            }
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Ok(Self { offsets, indices })
    }

    /// `(2r+1)^2` windows clipped to an `height x width` grid (row-major).
    pub fn image_window(height: usize, width: usize, radius: usize, include_self: bool) -> Self {
        let mut offsets = Vec::with_capacity(height * width + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        let r = radius as isize;
        for y in 0..height as isize {
            for x in 0..width as isize {
                for yy in (y - r).max(0)..(y + r + 1).min(height as isize) {
                    for xx in (x - r).max(0)..(x + r + 1).min(width as isize) {
                        if include_self || (yy, xx) != (y, x) {
                            indices.push(yy as usize * width + xx as usize);
                        }
                    }
                }
                offsets.push(indices.len());
            }
        }
        Self { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Scale { a: usize, k: f64 },
    AddScalar { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softplus { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Relu { a: usize },
    ClampMax { a: usize, hi: f64 },
    Sum { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, arg: Vec<usize> },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    L2Normalize { a: usize, norms: Vec<f64> },
    Conv2d { input: usize, kernel: usize, bias: Option<usize>, dilation: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    NbrMean { a: usize, nb: Arc<Neighborhoods> },
    NbrMax { a: usize, nb: Arc<Neighborhoods>, arg: Vec<usize> },
    MaskedMaxRows { a: usize, arg: Vec<Option<usize>> },
    Diag { a: usize },
    Reshape { a: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of the leaves that require them, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&self, t: Tensor) -> Result<Var<'_>> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Leaf without gradient.
    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.push(t, Op::Leaf, false, "constant")
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn req(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar output. A tape can be differentiated once.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(out.tape, self) {
            return Err(Error::invalid("output belongs to another tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::invalid("tape already used for a backward pass"));
        }
        let nodes = self.nodes.borrow();
        if nodes[out.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[out.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(Tensor::full(nodes[out.id].value.shape().to_vec(), 1.0));
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let acc = |grads: &mut Vec<Option<Tensor>>, pid: usize, gp: Tensor| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            };
            for (pid, gp) in backward_op(&nodes, node, &g)? {
                acc(&mut grads, pid, gp);
            }
        }
        // Only leaves keep gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

// ---------------------------------------------------------------------------
// shape helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::invalid(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed in the output rank, zero on broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut padded = vec![1; out.len() - shape.len()];
    padded.extend_from_slice(shape);
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..out.len()).rev() {
        strides[d] = if padded[d] == 1 && out[d] != 1 { 0 } else { s };
        s *= padded[d];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn keepdim(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

// ---------------------------------------------------------------------------
// forward ops

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, o: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, o.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands live on different tapes"))
        }
    }

    fn unary(self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        let rg = self.tape.req(self.id);
        self.tape.push(value, op, rg, name)
    }

    fn binary(self, o: Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (a, b) = (self.value(), o.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let (x, y) = (ad[ia], bd[ib]);
            data[o] = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        });
        let rg = self.tape.req(self.id) || self.tape.req(o.id);
        self.tape.push(
            Tensor::new(out_shape, data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: o.id,
            },
            rg,
            name,
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, BinKind::Add, "add")
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, BinKind::Sub, "sub")
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, BinKind::Mul, "mul")
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, BinKind::Div, "div")
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        let v = map(&self.value(), |x| x * k);
        self.unary(v, Op::Scale { a: self.id, k }, "scale")
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        let v = map(&self.value(), |x| x + k);
        self.unary(v, Op::AddScalar { a: self.id }, "add_scalar")
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = map(&self.value(), f64::exp);
        self.unary(v, Op::Exp { a: self.id }, "exp")
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = map(&self.value(), f64::ln);
        self.unary(v, Op::Log { a: self.id }, "log")
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        let v = map(&self.value(), softplus);
        self.unary(v, Op::Softplus { a: self.id }, "softplus")
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        let v = map(&self.value(), |x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu { a: self.id, slope }, "leaky_relu")
    }

    /// `[x]_+`.
    pub fn relu(self) -> Result<Var<'t>> {
        let v = map(&self.value(), |x| x.max(0.0));
        self.unary(v, Op::Relu { a: self.id }, "relu")
    }

    pub fn clamp_max(self, hi: f64) -> Result<Var<'t>> {
        let v = map(&self.value(), |x| x.min(hi));
        self.unary(v, Op::ClampMax { a: self.id, hi }, "clamp_max")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum { a: self.id }, "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = axis_split(a.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * n + k) * inner + i];
                }
            }
        }
        let t = Tensor::new(keepdim(a.shape(), axis), out)?;
        self.unary(t, Op::SumAxis { a: self.id, axis }, "sum_axis")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = axis_split(a.shape(), axis)?;
        if n == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let t = Tensor::new(keepdim(a.shape(), axis), out)?;
        self.unary(t, Op::MeanAxis { a: self.id, axis }, "mean_axis")
    }

    /// Max over `axis` (kept with extent 1); ties resolve to the lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = axis_split(a.shape(), axis)?;
        if n == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for k in 0..n {
                    let v = a.data()[(o * n + k) * inner + i];
                    if k == 0 || v > out[slot] {
                        out[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let t = Tensor::new(keepdim(a.shape(), axis), out)?;
        self.unary(t, Op::MaxAxis { a: self.id, axis, arg }, "max_axis")
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (a, b) = (self.value(), o.value());
        let (n, k) = a.dims2()?;
        let (k2, m) = b.dims2()?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul shape mismatch {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = matmul_raw(a.data(), b.data(), n, k, m);
        let rg = self.tape.req(self.id) || self.tape.req(o.id);
        self.tape.push(
            Tensor::matrix(n, m, data)?,
            Op::MatMul { a: self.id, b: o.id },
            rg,
            "matmul",
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        let t = Tensor::matrix(c, r, transpose_raw(a.data(), r, c))?;
        self.unary(t, Op::Transpose { a: self.id }, "transpose")
    }

    /// Row-wise (last axis) L2 normalization with the norm clamped below by
    /// [`L2_GUARD`].
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| Error::invalid("l2_normalize of a scalar"))?;
        if c == 0 {
            return Err(Error::invalid("l2_normalize over an empty axis"));
        }
        let rows = a.len() / c;
        let mut norms = Vec::with_capacity(rows);
        let mut data = a.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_GUARD);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        self.unary(t, Op::L2Normalize { a: self.id, norms }, "l2_normalize")
    }

    /// Stride-1 "same" convolution of an `[H, W, Cin]` input with a
    /// `[K, K, Cin, Cout]` kernel (odd `K`) at the given dilation; zero
    /// padding keeps the spatial extent.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, dilation: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        let (x, w) = (self.value(), kernel.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), dilation)?;
        if let Some(b) = &bias {
            if b.value().shape() != [geom.cout] {
                return Err(Error::invalid(format!(
                    "conv bias must have shape [{}], got {:?}",
                    geom.cout,
                    b.value().shape()
                )));
            }
        }
        let bias_val = bias.map(|b| b.value());
        let out = conv_forward(&geom, x.data(), w.data(), bias_val.as_deref().map(|b| b.data()));
        let rg = self.tape.req(self.id)
            || self.tape.req(kernel.id)
            || bias.is_some_and(|b| self.tape.req(b.id));
        self.tape.push(
            Tensor::new(vec![geom.h, geom.w, geom.cout], out)?,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                dilation,
            },
            rg,
            "conv2d",
        )
    }

    /// Selects rows (first-axis slices) by index; repeats are allowed.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n = *a.shape().first().ok_or_else(|| Error::invalid("gather_rows of a scalar"))?;
        let inner: usize = a.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("gather index {i} out of range {n}")));
            }
            data.extend_from_slice(&a.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        self.unary(t, Op::GatherRows { a: self.id, idx: idx.to_vec() }, "gather_rows")
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (a, b) = (self.value(), o.value());
        let (n, ca) = a.dims2()?;
        let (n2, cb) = b.dims2()?;
        if n != n2 {
            return Err(Error::invalid("concat_cols row count mismatch"));
        }
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let rg = self.tape.req(self.id) || self.tape.req(o.id);
        self.tape.push(
            Tensor::matrix(n, ca + cb, data)?,
            Op::ConcatCols { a: self.id, b: o.id },
            rg,
            "concat_cols",
        )
    }

    /// Row `i` of the output is the mean of rows `nb.get(i)` of `[N, C]`.
    pub fn neighborhood_mean(self, nb: &Arc<Neighborhoods>) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = a.dims2()?;
        check_neighborhoods(nb, n)?;
        let mut out = vec![0.0; nb.len() * c];
        for i in 0..nb.len() {
            let list = nb.get(i);
            let row = &mut out[i * c..(i + 1) * c];
            for &j in list {
                for (o, v) in row.iter_mut().zip(a.row(j)) {
                    *o += v;
                }
            }
            let inv = 1.0 / list.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::matrix(nb.len(), c, out)?;
        self.unary(t, Op::NbrMean { a: self.id, nb: nb.clone() }, "neighborhood_mean")
    }

    /// Channel-wise max over neighbor rows; ties go to the lowest position
    /// in the (sorted) neighbor list.
    pub fn neighborhood_max(self, nb: &Arc<Neighborhoods>) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = a.dims2()?;
        check_neighborhoods(nb, n)?;
        let mut out = vec![f64::NEG_INFINITY; nb.len() * c];
        let mut arg = vec![0usize; nb.len() * c];
        for i in 0..nb.len() {
            for &j in nb.get(i) {
                for ch in 0..c {
                    let v = a.data()[j * c + ch];
                    if v > out[i * c + ch] {
                        out[i * c + ch] = v;
                        arg[i * c + ch] = j;
                    }
                }
            }
        }
        let t = Tensor::matrix(nb.len(), c, out)?;
        self.unary(
            t,
            Op::NbrMax {
                a: self.id,
                nb: nb.clone(),
                arg,
            },
            "neighborhood_max",
        )
    }

    /// Row-wise max of `[N, M]` over entries with `mask[r * M + c]` set.
    /// Rows without admissible entries yield 0 and no gradient; the second
    /// return value marks which rows had any.
    pub fn masked_max_rows(self, mask: &[bool]) -> Result<(Var<'t>, Vec<bool>)> {
        let a = self.value();
        let (n, m) = a.dims2()?;
        if mask.len() != n * m {
            return Err(Error::invalid("mask size does not match matrix"));
        }
        let mut out = vec![0.0; n];
        let mut arg = vec![None; n];
        for r in 0..n {
            for c in 0..m {
                if mask[r * m + c] {
                    let v = a.at2(r, c);
                    if arg[r].is_none() || v > out[r] {
                        out[r] = v;
                        arg[r] = Some(c);
                    }
                }
            }
        }
        let has: Vec<bool> = arg.iter().map(|a| a.is_some()).collect();
        let v = self.unary(Tensor::vector(out), Op::MaskedMaxRows { a: self.id, arg }, "masked_max_rows")?;
        Ok((v, has))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(self) -> Result<Var<'t>> {
        let a = self.value();
        let (n, m) = a.dims2()?;
        if n != m {
            return Err(Error::invalid("diag needs a square matrix"));
        }
        let t = Tensor::vector((0..n).map(|i| a.at2(i, i)).collect());
        self.unary(t, Op::Diag { a: self.id }, "diag")
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshaped(shape)?;
        self.unary(t, Op::Reshape { a: self.id }, "reshape")
    }
}

fn check_neighborhoods(nb: &Neighborhoods, n: usize) -> Result<()> {
    if nb.indices.iter().any(|&j| j >= n) {
        return Err(Error::invalid("neighborhood index out of range"));
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// convolution kernels

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], dilation: usize) -> Result<Self> {
        let [h, wd, cin] = x else {
            return Err(Error::invalid(format!("conv2d input must be [H,W,C], got {x:?}")));
        };
        let [kh, kw, kcin, cout] = w else {
            return Err(Error::invalid(format!("conv2d kernel must be [K,K,Cin,Cout], got {w:?}")));
        };
        if kh != kw || kh % 2 == 0 || kcin != cin || dilation == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel {w:?} incompatible with input {x:?} at dilation {dilation}"
            )));
        }
        Ok(Self {
            h: *h,
            w: *wd,
            cin: *cin,
            cout: *cout,
            k: *kh,
            dilation,
        })
    }

    fn offset(&self, k: usize) -> isize {
        (k as isize - (self.k / 2) as isize) * self.dilation as isize
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.h * g.w * g.cout];
    let row_len = g.w * g.cout;
    out.par_chunks_mut(row_len.max(1)).enumerate().for_each(|(y, orow)| {
        for xx in 0..g.w {
            let o = &mut orow[xx * g.cout..(xx + 1) * g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..g.k {
                let iy = y as isize + g.offset(ky);
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = xx as isize + g.offset(kx);
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let base = (iy as usize * g.w + ix as usize) * g.cin;
                    let inp = &x[base..base + g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &a) in inp.iter().enumerate() {
                        let krow = &w[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += a * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.h * g.w * g.cin];
    let row_len = g.w * g.cin;
    gin.par_chunks_mut(row_len.max(1)).enumerate().for_each(|(iy, grow)| {
        for ix in 0..g.w {
            let gi = &mut grow[ix * g.cin..(ix + 1) * g.cin];
            for ky in 0..g.k {
                let y = iy as isize - g.offset(ky);
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let x = ix as isize - g.offset(kx);
                    if x < 0 || x >= g.w as isize {
                        continue;
                    }
                    let gbase = (y as usize * g.w + x as usize) * g.cout;
                    let go = &gout[gbase..gbase + g.cout];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, gv) in gi.iter_mut().enumerate() {
                        let krow = &w[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                        *gv += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    });
    gin
}

fn conv_grad_kernel(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let ksize = g.k * g.k * g.cin * g.cout;
    // Per-row partials summed in row order keep the result independent of
    // the thread count.
    let partials: Vec<Vec<f64>> = (0..g.h)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![0.0; ksize];
            for xx in 0..g.w {
                let gbase = (y * g.w + xx) * g.cout;
                let go = &gout[gbase..gbase + g.cout];
                for ky in 0..g.k {
                    let iy = y as isize + g.offset(ky);
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = xx as isize + g.offset(kx);
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let base = (iy as usize * g.w + ix as usize) * g.cin;
                        let kbase = (ky * g.k + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let a = x[base + ci];
                            let krow = &mut acc[kbase + ci * g.cout..kbase + (ci + 1) * g.cout];
                            for (kv, gv) in krow.iter_mut().zip(go) {
                                *kv += a * gv;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; ksize];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// backward rules

fn backward_op(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| nodes[id].value.clone();
    let req = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let shape = out.shape();
            let sa = broadcast_strides(av.shape(), shape);
            let sb = broadcast_strides(bv.shape(), shape);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            for_each_broadcast(shape, &sa, &sb, |o, ia, ib| {
                let (x, y, gg) = (ad[ia], bd[ib], gd[o]);
                let (da, db) = match kind {
                    BinKind::Add => (gg, gg),
                    BinKind::Sub => (gg, -gg),
                    BinKind::Mul => (gg * y, gg * x),
                    BinKind::Div => (gg / y, -gg * x / (y * y)),
                };
                ga[ia] += da;
                gb[ib] += db;
            });
            let mut v = Vec::new();
            if req(*a) {
                v.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
            }
            if req(*b) {
                v.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
            }
            v
        }
        Op::Scale { a, k } => vec![(*a, map(g, |x| x * k))],
        Op::AddScalar { a } => vec![(*a, g.clone())],
        Op::Exp { a } => vec![(*a, zip_map(g, out, |gg, y| gg * y))],
        Op::Log { a } => vec![(*a, zip_map(g, &val(*a), |gg, x| gg / x))],
        Op::Softplus { a } => vec![(*a, zip_map(g, &val(*a), |gg, x| gg * sigmoid(x)))],
        Op::LeakyRelu { a, slope } => {
            vec![(*a, zip_map(g, &val(*a), |gg, x| if x > 0.0 { gg } else { gg * slope }))]
        }
        Op::Relu { a } => vec![(*a, zip_map(g, &val(*a), |gg, x| if x > 0.0 { gg } else { 0.0 }))],
        Op::ClampMax { a, hi } => {
            vec![(*a, zip_map(g, &val(*a), |gg, x| if x <= *hi { gg } else { 0.0 }))]
        }
        Op::Sum { a } => {
            let av = val(*a);
            vec![(*a, Tensor::full(av.shape().to_vec(), g.item()))]
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let av = val(*a);
            let (outer, n, inner) = axis_split(av.shape(), *axis)?;
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut ga = vec![0.0; av.len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        ga[(o * n + k) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::MaxAxis { a, axis, arg } => {
            let av = val(*a);
            let (outer, n, inner) = axis_split(av.shape(), *axis)?;
            let mut ga = vec![0.0; av.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    ga[(o * n + arg[slot]) * inner + i] += g.data()[slot];
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k) = av.dims2()?;
            let (_, m) = bv.dims2()?;
            let mut v = Vec::new();
            if req(*a) {
                let bt = transpose_raw(bv.data(), k, m);
                v.push((*a, Tensor::matrix(n, k, matmul_raw(g.data(), &bt, n, m, k))?));
            }
            if req(*b) {
                let at = transpose_raw(av.data(), n, k);
                v.push((*b, Tensor::matrix(k, m, matmul_raw(&at, g.data(), k, n, m))?));
            }
            v
        }
        Op::Transpose { a } => {
            let (r, c) = g.dims2()?;
            vec![(*a, Tensor::matrix(c, r, transpose_raw(g.data(), r, c))?)]
        }
        Op::L2Normalize { a, norms } => {
            let av = val(*a);
            let c = *av.shape().last().expect("rank >= 1");
            let mut ga = vec![0.0; av.len()];
            for (r, &n) in norms.iter().enumerate() {
                let y = &out.data()[r * c..(r + 1) * c];
                let gr = &g.data()[r * c..(r + 1) * c];
                let dst = &mut ga[r * c..(r + 1) * c];
                let raw_norm = av.data()[r * c..(r + 1) * c]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if raw_norm > L2_GUARD {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        dst[i] = (gr[i] - y[i] * dot) / n;
                    }
                } else {
                    for i in 0..c {
                        dst[i] = gr[i] / n;
                    }
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            dilation,
        } => {
            let (xv, wv) = (val(*input), val(*kernel));
            let geom = ConvGeom::new(xv.shape(), wv.shape(), *dilation)?;
            let mut v = Vec::new();
            if req(*input) {
                let gi = conv_grad_input(&geom, g.data(), wv.data());
                v.push((*input, Tensor::new(xv.shape().to_vec(), gi)?));
            }
            if req(*kernel) {
                let gk = conv_grad_kernel(&geom, g.data(), xv.data());
                v.push((*kernel, Tensor::new(wv.shape().to_vec(), gk)?));
            }
            if let Some(b) = bias {
                if req(*b) {
                    let mut gb = vec![0.0; geom.cout];
                    for px in g.data().chunks_exact(geom.cout) {
                        for (o, v) in gb.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                    v.push((*b, Tensor::vector(gb)));
                }
            }
            v
        }
        Op::GatherRows { a, idx } => {
            let av = val(*a);
            let inner: usize = av.shape()[1..].iter().product();
            let mut ga = vec![0.0; av.len()];
            for (r, &i) in idx.iter().enumerate() {
                for k in 0..inner {
                    ga[i * inner + k] += g.data()[r * inner + k];
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::ConcatCols { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (n, ca) = av.dims2()?;
            let (_, cb) = bv.dims2()?;
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for r in 0..n {
                let row = g.row(r);
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            let mut v = Vec::new();
            if req(*a) {
                v.push((*a, Tensor::matrix(n, ca, ga)?));
            }
            if req(*b) {
                v.push((*b, Tensor::matrix(n, cb, gb)?));
            }
            v
        }
        Op::NbrMean { a, nb } => {
            let av = val(*a);
            let (_, c) = av.dims2()?;
            let mut ga = vec![0.0; av.len()];
            for i in 0..nb.len() {
                let list = nb.get(i);
                let inv = 1.0 / list.len() as f64;
                let gr = g.row(i);
                for &j in list {
                    for ch in 0..c {
                        ga[j * c + ch] += gr[ch] * inv;
                    }
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::NbrMax { a, nb, arg } => {
            let av = val(*a);
            let (_, c) = av.dims2()?;
            let mut ga = vec![0.0; av.len()];
            for i in 0..nb.len() {
                for ch in 0..c {
                    ga[arg[i * c + ch] * c + ch] += g.data()[i * c + ch];
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::MaskedMaxRows { a, arg } => {
            let av = val(*a);
            let (_, m) = av.dims2()?;
            let mut ga = vec![0.0; av.len()];
            for (r, col) in arg.iter().enumerate() {
                if let Some(c) = col {
                    ga[r * m + c] += g.data()[r];
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::Diag { a } => {
            let av = val(*a);
            let (n, _) = av.dims2()?;
            let mut ga = vec![0.0; av.len()];
            for i in 0..n {
                ga[i * n + i] = g.data()[i];
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga)?)]
        }
        Op::Reshape { a } => {
            let av = val(*a);
            vec![(*a, g.clone().reshaped(av.shape().to_vec())?)]
        }
    };
    Ok(res)
}
