//! Reverse-mode differentiation over a recorded list of primitive
//! applications.
//!
//! A [`Tape`] is appended to during the forward pass. Node `k` only ever
//! references nodes with smaller indices, so walking the list backwards is a
//! valid reverse topological order.

use rand::Rng;

use crate::error::{Result, StrafeError};
use crate::tensor::{self, Mode, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied primitive: receives the input values,
/// the output value and the output gradient, returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Softmax(Var),
    Conv1d(Var, Var, Var),
    Dropout(Var, Vec<T>),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, T, T),
    CumProd(Var),
    Sum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation record: every primitive applied during a forward pass,
/// in execution order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::Dropout(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::CumProd(a)
            | Op::Sum(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _) => vec![*a],
            Op::Conv1d(x, k, b) => vec![*x, *k, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Custom(vs, _) => vs.clone(),
        }
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, op)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c {
            return Err(StrafeError::dim("add_row", format!("row of length {} vs width {c}", rv.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv.data()[i % c])
            .collect();
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// `1 − x`, element-wise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Softmax over the last dimension; see [`tensor::softmax_lastdim`].
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(x), mask)?;
        self.push(out, Op::Softmax(x), "softmax_lastdim")
    }

    pub fn conv1d_seq(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = tensor::conv1d_seq(self.value(x), self.value(kernel), self.value(bias))?;
        self.push(out, Op::Conv1d(x, kernel, bias), "conv1d_seq")
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        match tensor::dropout(self.value(x), p, mode, rng)? {
            (_, None) => Ok(x),
            (out, Some(multiplier)) => self.push(out, Op::Dropout(x, multiplier), "dropout"),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log(x), "log")
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Running product down each column of a matrix.
    pub fn cumprod_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("cumprod_rows")?;
        let mut out = xv.data().to_vec();
        for t in 1..r {
            for j in 0..c {
                out[t * c + j] = out[(t - 1) * c + j] * out[t * c + j];
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::CumProd(x), "cumprod_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(StrafeError::dim("slice_cols", format!("columns {start}..{} of {c}", start + width)));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + width]);
        }
        let out = Tensor::matrix(r, width, data)?;
        self.push(out, Op::SliceCols(x, start), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(StrafeError::dim("concat_cols", format!("row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Builds a matrix from the listed rows of `x` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(StrafeError::dim("gather_rows", format!("row {bad} out of {r}")));
        }
        let data = rows.iter().flat_map(|&i| xv.row(i).iter().copied()).collect();
        let out = Tensor::matrix(rows.len(), c, data)?;
        self.push(out, Op::GatherRows(x, rows.to_vec()), "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(StrafeError::dim("concat_rows", format!("column counts {cols} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Records a primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.push(value, Op::Custom(inputs.to_vec(), backward), "custom")
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every node
    /// that requires a gradient. Uses of a value accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(StrafeError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            for (input, dx) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dx.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(dx),
                }
            }
            // Interior gradients are not part of the result; only leaves keep theirs.
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.value(v).shape().to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = matmul_nt(g, bv)?;
                let db = matmul_tn(av, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(&d, &q)| d * q).collect();
                let db = g.data().iter().zip(av.data()).map(|(&d, &p)| d * p).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::AddRow(x, row) => {
                let c = g.cols();
                let mut dr = vec![T::zero(); c];
                for (i, &d) in g.data().iter().enumerate() {
                    dr[i % c] += d;
                }
                vec![(*x, g.clone()), (*row, like(*row, dr)?)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Conv1d(x, kernel, bias) => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let d = xv.cols();
                let k = kv.shape()[0];
                let d_out = g.cols();
                let len_out = g.rows();
                let kd_len = k * d;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut db = vec![T::zero(); d_out];
                for p in 0..len_out {
                    let gr = g.row(p);
                    for (b, &q) in db.iter_mut().zip(gr) {
                        *b += q;
                    }
                    let window = &xv.data()[p * d..p * d + kd_len];
                    for i in 0..kd_len {
                        let w_row = &kv.data()[i * d_out..(i + 1) * d_out];
                        let dk_row = &mut dk[i * d_out..(i + 1) * d_out];
                        let xval = window[i];
                        let mut acc = T::zero();
                        for o in 0..d_out {
                            acc += w_row[o] * gr[o];
                            dk_row[o] += xval * gr[o];
                        }
                        dx[p * d + i] += acc;
                    }
                }
                vec![(*x, like(*x, dx)?), (*kernel, like(*kernel, dk)?), (*bias, like(*bias, db)?)]
            }
            Op::Dropout(x, multiplier) => {
                let dx = g.data().iter().zip(multiplier).map(|(&d, &m)| d * m).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sigmoid(x) => {
                let dx = g.data().iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Tanh(x) => {
                let dx = g.data().iter().zip(y.data()).map(|(&d, &t)| d * (T::one() - t * t)).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Log(x) => {
                let dx = g.data().iter().zip(self.value(*x).data()).map(|(&d, &v)| d / v).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Clamp(x, lo, hi) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::CumProd(x) => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2("cumprod_rows")?;
                let mut dx = vec![T::zero(); xv.len()];
                for j in 0..c {
                    let at = |t: usize| xv.data()[t * c + j];
                    let mut prefix = T::one();
                    for s in 0..r {
                        // d y_t / d x_s = prod_{u<=t, u!=s} x_u, accumulated without division.
                        let mut running = prefix;
                        let mut acc = g.data()[s * c + j] * running;
                        for t in s + 1..r {
                            running *= at(t);
                            acc += g.data()[t * c + j] * running;
                        }
                        dx[s * c + j] = acc;
                        prefix *= at(s);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.data()[0]))],
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = g.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..g.rows() {
                    dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, like(p, dp)?));
                }
                out
            }
            Op::GatherRows(x, rows) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (k, &i) in rows.iter().enumerate() {
                    for (d, &q) in dx[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *d += q;
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).len();
                    out.push((p, like(p, g.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
                out
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = backward(&values, y, g);
                if grads.len() != inputs.len() {
                    return Err(StrafeError::Contract("custom backward returned the wrong number of gradients".into()));
                }
                for (gi, vi) in grads.iter().zip(&values) {
                    gi.same_shape(vi, "custom")?;
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }
}

/// `a · bᵀ`
fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (n, k2) = b.dims2("matmul")?;
    debug_assert_eq!(k, k2);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(b.row(j)).map(|(&p, &q)| p * q).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b`
fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    debug_assert_eq!(k, k2);
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}
