//! Eager computation graph with a taped reverse pass.
//!
//! Every primitive computes its value immediately and appends a node to the
//! tape. Nodes only ever reference earlier nodes, so the tape order is a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine { a: Var, scale: f64 },
    Tanh(Var),
    Relu(Var),
    SmoothRelu { a: Var, d: f64 },
    SmoothReluGrad { a: Var, d: f64 },
    Square(Var),
    Sum(Var),
    RowSum(Var),
    Dot(Var, Var),
    NormSq(Var),
    MaxConst { a: Var, c: f64 },
    Concat(Vec<Var>),
    Select { a: Var, cols: Vec<usize> },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Smoothed ReLU: `0` for `s <= 0`, `s^2 / 2d` on `(0, d)`, `s - d/2` beyond.
#[inline]
pub fn smooth_relu(s: f64, d: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s < d {
        s * s / (2.0 * d)
    } else {
        s - 0.5 * d
    }
}

/// Derivative of [`smooth_relu`].
#[inline]
pub fn smooth_relu_grad(s: f64, d: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s < d {
        s / d
    } else {
        1.0
    }
}

#[inline]
fn smooth_relu_second(s: f64, d: f64) -> f64 {
    if s > 0.0 && s < d {
        1.0 / d
    } else {
        0.0
    }
}

/// Reverse-mode gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns an explicit zero tensor for nodes
    /// off every path to the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Tape of eagerly evaluated nodes. Leaves may borrow their values for `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    pub fn variable_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Leaf that is treated as data (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var], name: &'static str) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, value: Cow::Owned(value), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.rows(), va.cols(), data).expect("shape checked")
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    /// `a * b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(Op::MatMul { a, b, trans_b: false }, out, &[a, b], "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_t", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.0);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        self.push(Op::MatMul { a, b, trans_b: true }, out, &[a, b], "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        let out = self.zip_with(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), out, &[a, b], "div")
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        if sa.1 > 0 {
            for chunk in out.data_mut().chunks_mut(sa.1) {
                for (o, b) in chunk.iter_mut().zip(&r) {
                    *o += b;
                }
            }
        }
        self.push(Op::AddRow(a, row), out, &[a, row], "add_row")
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("mul_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        if sa.1 > 0 {
            for chunk in out.data_mut().chunks_mut(sa.1) {
                for (o, b) in chunk.iter_mut().zip(&r) {
                    *o *= b;
                }
            }
        }
        self.push(Op::MulRow(a, row), out, &[a, row], "mul_row")
    }

    /// Scales row `i` of `a` by entry `i` of the `m x 1` column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, DiffError> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(shape_err("mul_col", sa, sc));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        if sa.1 > 0 {
            for (chunk, s) in out.data_mut().chunks_mut(sa.1).zip(&c) {
                for o in chunk.iter_mut() {
                    *o *= s;
                }
            }
        }
        self.push(Op::MulCol(a, col), out, &[a, col], "mul_col")
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let out = self.unary(a, |x| scale * x + shift);
        self.push(Op::Affine { a, scale }, out, &[a], "affine")
    }

    /// Scalar multiple `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.unary(a, f64::tanh);
        self.push(Op::Tanh(a), out, &[a], "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out, &[a], "relu")
    }

    pub fn smooth_relu(&mut self, a: Var, d: f64) -> Result<Var, DiffError> {
        if !(d > 0.0) {
            return Err(DiffError::Domain(format!("smoothed relu threshold must be positive, got {d}")));
        }
        let out = self.unary(a, |x| smooth_relu(x, d));
        self.push(Op::SmoothRelu { a, d }, out, &[a], "smooth_relu")
    }

    /// Derivative of the smoothed ReLU as a differentiable node.
    pub fn smooth_relu_grad(&mut self, a: Var, d: f64) -> Result<Var, DiffError> {
        if !(d > 0.0) {
            return Err(DiffError::Domain(format!("smoothed relu threshold must be positive, got {d}")));
        }
        let out = self.unary(a, |x| smooth_relu_grad(x, d));
        self.push(Op::SmoothReluGrad { a, d }, out, &[a], "smooth_relu_grad")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.unary(a, |x| x * x);
        self.push(Op::Square(a), out, &[a], "square")
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a], "sum")
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(DiffError::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, `m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a);
        let (m, n) = v.shape();
        let data = (0..m).map(|r| v.data()[r * n..(r + 1) * n].iter().sum()).collect();
        let out = Tensor::new(m, 1, data)?;
        self.push(Op::RowSum(a), out, &[a], "row_sum")
    }

    /// Inner product of two same-shaped tensors, `1 x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s), &[a, b], "dot")
    }

    /// Squared Euclidean norm of all entries, `1 x 1`.
    pub fn norm_sq(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::NormSq(a), Tensor::scalar(s), &[a], "norm_sq")
    }

    /// Per-row inner products of two same-shaped batches, `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        self.row_sum(p)
    }

    /// Per-row squared norms, `m x 1`.
    pub fn row_norm_sq(&mut self, a: Var) -> Result<Var, DiffError> {
        let p = self.square(a)?;
        self.row_sum(p)
    }

    /// `max(a, c)` elementwise.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.unary(a, |x| if x > c { x } else { c });
        self.push(Op::MaxConst { a, c }, out, &[a], "max_const")
    }

    /// Column-wise concatenation of batches with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or_else(|| DiffError::Shape("concat of nothing".into()))?;
        let m = self.shape(*first).0;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != m {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            total += s.1;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(m, total, data)?;
        self.push(Op::Concat(parts.to_vec()), out, parts, "concat")
    }

    /// Gathers the listed columns of `a`.
    pub fn select(&mut self, a: Var, cols: &[usize]) -> Result<Var, DiffError> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(DiffError::Shape(format!("select: column {bad} out of range for width {n}")));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            let row = v.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(m, cols.len(), data)?;
        self.push(Op::Select { a, cols: cols.to_vec() }, out, &[a], "select")
    }

    /// Contiguous column range `start..end` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let cols: Vec<usize> = (start..end).collect();
        self.select(a, &cols)
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(DiffError::NotScalar(r, c));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let shapes = self.nodes.iter().map(|node| node.value.shape()).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let mut da = Tensor::zeros(va.rows(), va.cols());
                        // C = A B  => dA = dC B^T ; C = A B^T => dA = dC B
                        gemm(&g, false, vb, !*trans_b, &mut da, 0.0);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = Tensor::zeros(vb.rows(), vb.cols());
                        if *trans_b {
                            gemm(&g, true, va, false, &mut db, 0.0);
                        } else {
                            gemm(va, true, &g, false, &mut db, 0.0);
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, g.map(|x| -x));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = zip(&g, self.value(*b), |x, y| x * y);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = zip(&g, self.value(*a), |x, y| x * y);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    if self.requires_grad(*a) {
                        let da = zip(&g, vb, |x, y| x / y);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let va = self.value(*a);
                        let data = g
                            .data()
                            .iter()
                            .zip(va.data())
                            .zip(vb.data())
                            .map(|((gg, x), y)| -gg * x / (y * y))
                            .collect();
                        let db = Tensor::new(vb.rows(), vb.cols(), data)?;
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*row) {
                        self.acc(&mut grads, *row, col_sums(&g));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    if self.requires_grad(*row) {
                        let prod = zip(&g, va, |x, y| x * y);
                        self.acc(&mut grads, *row, col_sums(&prod));
                    }
                    if self.requires_grad(*a) {
                        let mut da = g;
                        let n = da.cols();
                        if n > 0 {
                            for chunk in da.data_mut().chunks_mut(n) {
                                for (o, s) in chunk.iter_mut().zip(vr.data()) {
                                    *o *= s;
                                }
                            }
                        }
                        self.acc(&mut grads, *a, da);
                    }
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (self.value(*a), self.value(*col));
                    if self.requires_grad(*col) {
                        let prod = zip(&g, va, |x, y| x * y);
                        self.acc(&mut grads, *col, row_sums(&prod));
                    }
                    if self.requires_grad(*a) {
                        let mut da = g;
                        let n = da.cols();
                        if n > 0 {
                            for (chunk, s) in da.data_mut().chunks_mut(n).zip(vc.data()) {
                                for o in chunk.iter_mut() {
                                    *o *= s;
                                }
                            }
                        }
                        self.acc(&mut grads, *a, da);
                    }
                }
                Op::Affine { a, scale } => {
                    let s = *scale;
                    self.acc(&mut grads, *a, g.map(|x| s * x));
                }
                Op::Tanh(a) => {
                    let da = zip(&g, &node.value, |x, y| x * (1.0 - y * y));
                    self.acc(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = zip(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    self.acc(&mut grads, *a, da);
                }
                Op::SmoothRelu { a, d } => {
                    let d = *d;
                    let da = zip(&g, self.value(*a), |x, y| x * smooth_relu_grad(y, d));
                    self.acc(&mut grads, *a, da);
                }
                Op::SmoothReluGrad { a, d } => {
                    let d = *d;
                    let da = zip(&g, self.value(*a), |x, y| x * smooth_relu_second(y, d));
                    self.acc(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let da = zip(&g, self.value(*a), |x, y| 2.0 * x * y);
                    self.acc(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    let s = g.data()[0];
                    self.acc(&mut grads, *a, Tensor::filled(r, c, s));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    if c > 0 {
                        for (chunk, s) in da.data_mut().chunks_mut(c).zip(g.data()) {
                            chunk.fill(*s);
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    if self.requires_grad(*a) {
                        let da = self.value(*b).map(|y| s * y);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).map(|y| s * y);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::NormSq(a) => {
                    let s = g.data()[0];
                    let da = self.value(*a).map(|y| 2.0 * s * y);
                    self.acc(&mut grads, *a, da);
                }
                Op::MaxConst { a, c } => {
                    let c = *c;
                    let da = zip(&g, self.value(*a), |x, y| if y > c { x } else { 0.0 });
                    self.acc(&mut grads, *a, da);
                }
                Op::Concat(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.requires_grad(*p) {
                            let mut data = Vec::with_capacity(m * w);
                            for r in 0..m {
                                data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            self.acc(&mut grads, *p, Tensor::new(m, w, data)?);
                        }
                        offset += w;
                    }
                }
                Op::Select { a, cols } => {
                    let (m, n) = self.shape(*a);
                    let mut da = Tensor::zeros(m, n);
                    let k = cols.len();
                    for r in 0..m {
                        for (j, &c) in cols.iter().enumerate() {
                            da.data_mut()[r * n + c] += g.data()[r * k + j];
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
            }
        }
        let shapes_vec: Vec<(usize, usize)> = shapes;
        Ok(Gradients { grads, shapes: shapes_vec })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("matching shapes")
}

fn col_sums(t: &Tensor) -> Tensor {
    let (m, n) = t.shape();
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::new(1, n, out).expect("row shape")
}

fn row_sums(t: &Tensor) -> Tensor {
    let (m, n) = t.shape();
    let data = (0..m).map(|r| t.data()[r * n..(r + 1) * n].iter().sum()).collect();
    Tensor::new(m, 1, data).expect("column shape")
}
