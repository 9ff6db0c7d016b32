//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] runs its forward kernel immediately, checks
//! the result for NaN/Inf and records a node on the [`Tape`]. Nodes are stored
//! in creation order, which is already a topological order, so
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use sccan::autodiff::Tape;
//! use sccan::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.variable(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softmax(usize),
    Sum(usize),
    Gather {
        src: usize,
        index: Rc<[Option<usize>]>,
    },
    Slice {
        src: usize,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowNormalize {
        src: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    LayerNorm {
        src: usize,
        rstd: Vec<f64>,
    },
    Gelu(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `tensor` as an input; gradients flow to it iff it requires them.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let tracked = tensor.requires_grad();
        let mut value = tensor.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, tracked)
    }

    /// Records a tracked input regardless of its `requires_grad` flag.
    pub fn variable(&self, tensor: &Tensor) -> Var<'_> {
        let mut value = tensor.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn record(&self, name: &str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        value.check_finite(name)?;
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        Ok(self.push(value, op, tracked))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = matrix_dims(&values[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (m, n) = matrix_dims(v, "concat_cols")?;
            if m != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {rows} vs {m}"),
                ));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &n) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * n..(r + 1) * n]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::derived(vec![rows, total], out, values[0].dtype());
        self.record("concat_cols", value, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = matrix_dims(&values[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &values {
            let (m, n) = matrix_dims(v, "concat_rows")?;
            if n != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {cols} vs {n}"),
                ));
            }
            rows += m;
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::derived(vec![rows, cols], out, values[0].dtype());
        self.record("concat_rows", value, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match grads[id].as_mut() {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => grads[id] = Some(delta),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(val(*a));
            let n = val(*b).shape()[1];
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if nodes[*a].tracked {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                add_into(grads, nodes, *a, da);
            }
            if nodes[*b].tracked {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                add_into(grads, nodes, *b, db);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(val(*a));
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = g[j * m + i];
                }
            }
            add_into(grads, nodes, *a, da);
        }
        Op::Reshape(a) | Op::AddScalar(a) => add_into(grads, nodes, *a, g.to_vec()),
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g.to_vec());
            add_into(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, g.to_vec());
            add_into(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            add_into(
                grads,
                nodes,
                *a,
                g.iter().zip(bd).map(|(g, b)| g * b).collect(),
            );
            add_into(
                grads,
                nodes,
                *b,
                g.iter().zip(ad).map(|(g, a)| g * a).collect(),
            );
        }
        Op::Div(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            add_into(
                grads,
                nodes,
                *a,
                g.iter().zip(bd).map(|(g, b)| g / b).collect(),
            );
            let db = g
                .iter()
                .zip(ad.iter().zip(bd))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            add_into(grads, nodes, *b, db);
        }
        Op::AddRow(a, b) => {
            let n = val(*b).numel();
            add_into(grads, nodes, *a, g.to_vec());
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            add_into(grads, nodes, *b, db);
        }
        Op::MulRow(a, s) => {
            let (ad, sd) = (val(*a).data(), val(*s).data());
            let n = sd.len();
            let da = g.iter().enumerate().map(|(i, gv)| gv * sd[i % n]).collect();
            add_into(grads, nodes, *a, da);
            let mut ds = vec![0.0; n];
            for (i, (gv, av)) in g.iter().zip(ad).enumerate() {
                ds[i % n] += gv * av;
            }
            add_into(grads, nodes, *s, ds);
        }
        Op::Scale(a, c) => add_into(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            let mut da = vec![0.0; y.len()];
            for ((dst, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            add_into(grads, nodes, *a, da);
        }
        Op::Sum(a) => add_into(grads, nodes, *a, vec![g[0]; val(*a).numel()]),
        Op::Gather { src, index } => {
            let n = node.value.shape()[1];
            let mut da = vec![0.0; val(*src).numel()];
            for (r, ix) in index.iter().enumerate() {
                if let Some(s) = ix {
                    let dst = &mut da[s * n..(s + 1) * n];
                    dst.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(d, v)| *d += v);
                }
            }
            add_into(grads, nodes, *src, da);
        }
        Op::Slice { src, rows, cols } => {
            let n = val(*src).shape()[1];
            let w = cols.len();
            let mut da = vec![0.0; val(*src).numel()];
            for (r, row) in rows.clone().enumerate() {
                da[row * n + cols.start..row * n + cols.end]
                    .copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            add_into(grads, nodes, *src, da);
        }
        Op::ConcatCols(ids) => {
            let total = node.value.shape()[1];
            let rows = node.value.shape()[0];
            let mut offset = 0;
            for &id in ids {
                let n = val(id).shape()[1];
                let mut da = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    da.extend_from_slice(&g[r * total + offset..r * total + offset + n]);
                }
                add_into(grads, nodes, id, da);
                offset += n;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = val(id).numel();
                add_into(grads, nodes, id, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::RowNormalize { src, norms, eps } => {
            let y = node.value.data();
            let d = y.len() / norms.len();
            let mut da = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                if norm > *eps {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dst, y), g) in da[span].iter_mut().zip(yr).zip(gr) {
                        *dst = (g - y * dot) / norm;
                    }
                } else {
                    for (dst, g) in da[span].iter_mut().zip(gr) {
                        *dst = g / eps;
                    }
                }
            }
            add_into(grads, nodes, *src, da);
        }
        Op::LayerNorm { src, rstd } => {
            let xhat = node.value.data();
            let d = xhat.len() / rstd.len();
            let mut da = vec![0.0; xhat.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let (xr, gr) = (&xhat[span.clone()], &g[span.clone()]);
                let mean_g = gr.iter().sum::<f64>() / d as f64;
                let mean_gx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / d as f64;
                for ((dst, x), g) in da[span].iter_mut().zip(xr).zip(gr) {
                    *dst = rs * (g - mean_g - x * mean_gx);
                }
            }
            add_into(grads, nodes, *src, da);
        }
        Op::Gelu(a) => {
            let da = val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, g)| g * gelu_grad(x))
                .collect();
            add_into(grads, nodes, *a, da);
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::dim(op, format!("expected a matrix, got {other:?}"))),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed to it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `var` into `tensor`'s gradient buffer.
    pub fn accumulate(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(&self, name: &str, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.tape.record(name, value, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, name: &str, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        self.tape.record(name, value, op, &[self.id, other.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        self.binary(other, "matmul", v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = tensor::transpose(&self.value())?;
        self.unary("transpose", v, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.unary("reshape", v, Op::Reshape(self.id))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::derived(a.shape().to_vec(), data, a.dtype()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        self.binary(other, "add", v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        self.binary(other, "sub", v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        self.binary(other, "mul", v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "div", |a, b| a / b)?;
        self.binary(other, "div", v, Op::Div(self.id, other.id))
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, r) = (self.value(), row.value());
        let n = match a.shape() {
            [_, n] => *n,
            other => {
                return Err(Error::dim(
                    name,
                    format!("expected a matrix, got {other:?}"),
                ))
            }
        };
        if r.numel() != n {
            return Err(Error::dim(
                name,
                format!("row of {} vs {n} columns", r.numel()),
            ));
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r.data()[i % n]))
            .collect();
        Ok(Tensor::derived(a.shape().to_vec(), data, a.dtype()))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "add_row", |a, b| a + b)?;
        self.binary(row, "add_row", v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        self.binary(row, "mul_row", v, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|v| v * c).collect();
        let v = Tensor::derived(a.shape().to_vec(), data, a.dtype());
        self.unary("scale", v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|v| v + c).collect();
        let v = Tensor::derived(a.shape().to_vec(), data, a.dtype());
        self.unary("add_scalar", v, Op::AddScalar(self.id))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let v = tensor::softmax_lastdim(&self.value());
        self.unary("softmax", v, Op::Softmax(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let v = Tensor::derived(vec![1], vec![a.data().iter().sum()], a.dtype());
        self.unary("sum", v, Op::Sum(self.id))
    }

    /// Selects rows of a matrix by index; `None` yields a zero row.
    pub fn gather_rows(self, index: Rc<[Option<usize>]>) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = matrix_dims(&a, "gather_rows")?;
        let mut out = vec![0.0; index.len() * n];
        for (r, ix) in index.iter().enumerate() {
            if let Some(s) = *ix {
                if s >= m {
                    return Err(Error::dim("gather_rows", format!("row {s} of {m}")));
                }
                out[r * n..(r + 1) * n].copy_from_slice(&a.data()[s * n..(s + 1) * n]);
            }
        }
        let v = Tensor::derived(vec![index.len(), n], out, a.dtype());
        self.unary(
            "gather_rows",
            v,
            Op::Gather {
                src: self.id,
                index,
            },
        )
    }

    /// Rectangular sub-block of a matrix.
    pub fn slice(self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = matrix_dims(&a, "slice")?;
        if rows.end > m || cols.end > n || rows.is_empty() || cols.is_empty() {
            return Err(Error::dim("slice", format!("{rows:?}x{cols:?} of {m}x{n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&a.data()[r * n + cols.start..r * n + cols.end]);
        }
        let v = Tensor::derived(vec![rows.len(), cols.len()], out, a.dtype());
        self.unary(
            "slice",
            v,
            Op::Slice {
                src: self.id,
                rows,
                cols,
            },
        )
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn row_normalize(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (_, d) = matrix_dims(&a, "row_normalize")?;
        let norms: Vec<f64> = a
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let data = tensor::row_normalized(a.data(), d, eps);
        let v = Tensor::derived(a.shape().to_vec(), data, a.dtype());
        self.unary(
            "row_normalize",
            v,
            Op::RowNormalize {
                src: self.id,
                norms,
                eps,
            },
        )
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (_, d) = matrix_dims(&a, "layer_norm")?;
        let mut out = a.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let v = Tensor::derived(a.shape().to_vec(), out, a.dtype());
        self.unary("layer_norm", v, Op::LayerNorm { src: self.id, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        let v = Tensor::derived(a.shape().to_vec(), data, a.dtype());
        self.unary("gelu", v, Op::Gelu(self.id))
    }
}
