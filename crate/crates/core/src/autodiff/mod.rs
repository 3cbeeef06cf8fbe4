//! A small tape-based reverse-mode differentiation engine.
//!
//! Every value is a dense row-major matrix stored in a [`Graph`]. A [`Tensor`]
//! is a handle into that graph. Nodes are appended in evaluation order, so the
//! node list is already a topological order and `backward` is a single reverse
//! sweep. Only the operations the model graph needs are provided.

mod gradcheck;
mod kernels;
mod optim;
mod params;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport, GRAD_SCALE_FLOOR};
pub use optim::{OptimizerState, DEFAULT_DECAY, DEFAULT_EPSILON};
pub use params::{Gradients, Param, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside `cross_entropy`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Additive logit offset for masked-out positions.
pub const MASK_OFFSET: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1)
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    MatMulT(Tensor, Tensor),
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Relu(Tensor),
    Softmax(Tensor),
    MaskedSoftmax(Tensor),
    CrossEntropy(Tensor, Vec<usize>),
    Mse(Tensor, Vec<f64>),
    Concat(Vec<Tensor>),
    SliceCols(Tensor, usize),
    SliceRows(Tensor, usize),
    Gather(Tensor, Vec<usize>),
    Blend(Tensor, Tensor, Vec<bool>),
    Dot(Tensor, Tensor),
    Sum(Tensor),
    Mean(Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Tensor>>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.0]
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.node(t).shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.node(t).value
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.node(t).value[0]
    }

    /// Row `r` of a tensor.
    pub fn row(&self, t: Tensor, r: usize) -> &[f64] {
        let n = self.node(t);
        &n.value[r * n.shape.cols..(r + 1) * n.shape.cols]
    }

    /// Accumulated gradient; `None` until a backward pass reached the node.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.node(t).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn leaf_checked(
        &mut self,
        shape: Shape,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        if value.len() != shape.len() {
            return Err(Error::Dimension {
                op: "leaf",
                left: shape.pair(),
                right: (value.len(), 1),
            });
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, shape: Shape, value: Vec<f64>) -> Result<Tensor> {
        self.leaf_checked(shape, value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Result<Tensor> {
        self.leaf_checked(shape, value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(t) = self.params[id.0] {
            return t;
        }
        let p = store.get(id);
        let t = self.push(p.shape, p.values.clone(), Op::Leaf, !self.frozen);
        self.params[id.0] = Some(t);
        t
    }

    /// Copies a value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let n = self.node(t);
        let (shape, value) = (n.shape, n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// Adds the gradients of all parameter leaves into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients) {
        for (i, slot) in self.params.iter().enumerate() {
            let Some(t) = slot else { continue };
            if i >= grads.len() {
                continue;
            }
            if let Some(g) = &self.node(*t).grad {
                for (acc, v) in grads.get_mut(ParamId(i)).iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    fn any_grad(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.node(*t).requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.pair(),
                right: sb.pair(),
            });
        }
        Ok(sa)
    }

    fn check_finite(&self, op: &'static str, t: Tensor) -> Result<()> {
        if let Some(v) = self.value(t).iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op,
                detail: format!("non-finite input {v}"),
            });
        }
        Ok(())
    }

    /// `a[m x k] * b[k x n]`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.pair(),
                right: sb.pair(),
            });
        }
        let value = kernels::mm(self.value(a), self.value(b), sa.rows, sa.cols, sb.cols);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Shape::new(sa.rows, sb.cols), value, Op::MatMul(a, b), rg))
    }

    /// `a[m x k] * b[n x k]^T`
    pub fn matmul_t(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: sa.pair(),
                right: sb.pair(),
            });
        }
        let value = kernels::mm_nt(self.value(a), self.value(b), sa.rows, sa.cols, sb.rows);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Shape::new(sa.rows, sb.rows), value, Op::MatMulT(a, b), rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        let shape = self.same_shape(op_name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a[m x n]`.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa.pair(),
                right: sr.pair(),
            });
        }
        let r = self.value(row);
        let value = self
            .value(a)
            .chunks(sa.cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(sa, value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a), value, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a), value, op, rg)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_finite("softmax", a)?;
        let shape = self.shape(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(shape.cols.max(1)) {
            softmax_in_place(row, None);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape, value, Op::Softmax(a), rg))
    }

    /// Row-wise softmax restricted to the columns where `mask` is true.
    ///
    /// Masked-out logits are shifted by [`MASK_OFFSET`] before normalising and
    /// their outputs are then set to exactly zero, so they receive no gradient.
    pub fn masked_softmax(&mut self, a: Tensor, mask: &[bool]) -> Result<Tensor> {
        let shape = self.shape(a);
        if mask.len() != shape.cols {
            return Err(Error::Dimension {
                op: "masked_softmax",
                left: shape.pair(),
                right: (1, mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidMask);
        }
        self.check_finite("masked_softmax", a)?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(shape.cols) {
            softmax_in_place(row, Some(mask));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape, value, Op::MaskedSoftmax(a), rg))
    }

    /// Mean over rows of `-ln max(p[target], LOG_FLOOR)`.
    pub fn cross_entropy(&mut self, p: Tensor, targets: &[usize]) -> Result<Tensor> {
        let shape = self.shape(p);
        if targets.len() != shape.rows || shape.rows == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: shape.pair(),
                right: (targets.len(), 1),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= shape.cols) {
            return Err(Error::Usage(format!(
                "cross_entropy target {t} out of range for {} classes",
                shape.cols
            )));
        }
        let pv = self.value(p);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -pv[r * shape.cols + t].max(LOG_FLOOR).ln())
            .sum();
        let loss = total / shape.rows as f64;
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            Op::CrossEntropy(p, targets.to_vec()),
            rg,
        ))
    }

    /// Mean over rows of the squared Euclidean distance to the constant `target`.
    pub fn mse(&mut self, p: Tensor, target: &[f64]) -> Result<Tensor> {
        let shape = self.shape(p);
        if target.len() != shape.len() || shape.rows == 0 {
            return Err(Error::Dimension {
                op: "mse",
                left: shape.pair(),
                right: (target.len(), 1),
            });
        }
        let total: f64 = self
            .value(p)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = total / shape.rows as f64;
        let rg = self.any_grad(&[p]);
        Ok(self.push(Shape::scalar(), vec![loss], Op::Mse(p, target.to_vec()), rg))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let rows = self.shape(first).rows;
        for &p in parts {
            if self.shape(p).rows != rows {
                return Err(Error::Dimension {
                    op: "concat",
                    left: self.shape(first).pair(),
                    right: self.shape(p).pair(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                value.extend_from_slice(self.row(p, r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Shape::new(rows, cols),
            value,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape(a);
        if start > end || end > shape.cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: shape.pair(),
                right: (start, end),
            });
        }
        let width = end - start;
        let mut value = Vec::with_capacity(shape.rows * width);
        for r in 0..shape.rows {
            value.extend_from_slice(&self.row(a, r)[start..end]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Shape::new(shape.rows, width),
            value,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape(a);
        if start > end || end > shape.rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: shape.pair(),
                right: (start, end),
            });
        }
        let value = self.value(a)[start * shape.cols..end * shape.cols].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Shape::new(end - start, shape.cols),
            value,
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let shape = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape.rows) {
            return Err(Error::Usage(format!(
                "gather index {bad} out of range for {} rows",
                shape.rows
            )));
        }
        let mut value = Vec::with_capacity(ids.len() * shape.cols);
        for &i in ids {
            value.extend_from_slice(self.row(table, i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Shape::new(ids.len(), shape.cols),
            value,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Row-wise select: row `i` comes from `on` where `mask[i]`, else from `off`.
    pub fn blend(&mut self, on: Tensor, off: Tensor, mask: &[bool]) -> Result<Tensor> {
        let shape = self.same_shape("blend", on, off)?;
        if mask.len() != shape.rows {
            return Err(Error::Dimension {
                op: "blend",
                left: shape.pair(),
                right: (mask.len(), 1),
            });
        }
        let mut value = Vec::with_capacity(shape.len());
        for (r, &m) in mask.iter().enumerate() {
            value.extend_from_slice(self.row(if m { on } else { off }, r));
        }
        let rg = self.any_grad(&[on, off]);
        Ok(self.push(shape, value, Op::Blend(on, off, mask.to_vec()), rg))
    }

    /// Sum of the elementwise product of two equal-shape tensors.
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("dot", a, b)?;
        let v: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Shape::scalar(), vec![v], Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Shape::scalar(), vec![v], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.shape(a).len().max(1) as f64;
        let v = self.value(a).iter().sum::<f64>() / n;
        let rg = self.any_grad(&[a]);
        self.push(Shape::scalar(), vec![v], Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Gradients of one call are computed in fresh buffers and then added to
    /// whatever earlier calls left behind, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {}x{}",
                shape.rows, shape.cols
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut pending);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut give = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[t.0];
            if n.requires_grad {
                let buf = pending[t.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf);
            }
        };
        let add_into =
            |buf: &mut [f64], src: &[f64]| buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if self.requires_grad(*a) {
                    let da = kernels::mm_nt(g, self.value(*b), m, n, k);
                    give(*a, &mut |buf| add_into(buf, &da));
                }
                if self.requires_grad(*b) {
                    let db = kernels::mm_tn(self.value(*a), g, k, m, n);
                    give(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.rows, sa.cols, sb.rows);
                if self.requires_grad(*a) {
                    let da = kernels::mm(g, self.value(*b), m, n, k);
                    give(*a, &mut |buf| add_into(buf, &da));
                }
                if self.requires_grad(*b) {
                    let db = kernels::mm_tn(g, self.value(*a), n, m, k);
                    give(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                give(*a, &mut |buf| add_into(buf, g));
                give(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, row) => {
                give(*a, &mut |buf| add_into(buf, g));
                let cols = self.shape(*row).cols.max(1);
                give(*row, &mut |buf| {
                    for chunk in g.chunks(cols) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                give(*a, &mut |buf| add_into(buf, g));
                give(*b, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, v)| *x -= v)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                give(*a, &mut |buf| {
                    for ((x, gv), y) in buf.iter_mut().zip(g).zip(vb) {
                        *x += gv * y;
                    }
                });
                give(*b, &mut |buf| {
                    for ((x, gv), y) in buf.iter_mut().zip(g).zip(va) {
                        *x += gv * y;
                    }
                });
            }
            Op::Scale(a, s) => give(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(x, v)| *x += v * s)
            }),
            Op::Tanh(a) => give(*a, &mut |buf| {
                for ((x, gv), y) in buf.iter_mut().zip(g).zip(&node.value) {
                    *x += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => give(*a, &mut |buf| {
                for ((x, gv), y) in buf.iter_mut().zip(g).zip(&node.value) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let input = self.value(*a);
                give(*a, &mut |buf| {
                    for ((x, gv), i) in buf.iter_mut().zip(g).zip(input) {
                        if *i > 0.0 {
                            *x += gv;
                        }
                    }
                })
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let cols = node.shape.cols.max(1);
                give(*a, &mut |buf| {
                    for ((bx, gr), yr) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(node.value.chunks(cols))
                    {
                        let inner: f64 = gr.iter().zip(yr).map(|(gv, y)| gv * y).sum();
                        for ((x, gv), y) in bx.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gv - inner);
                        }
                    }
                })
            }
            Op::CrossEntropy(p, targets) => {
                let cols = self.shape(*p).cols;
                let pv = self.value(*p);
                let scale = g[0] / targets.len() as f64;
                give(*p, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let v = pv[r * cols + t];
                        if v > LOG_FLOOR {
                            buf[r * cols + t] -= scale / v;
                        }
                    }
                })
            }
            Op::Mse(p, target) => {
                let pv = self.value(*p);
                let scale = 2.0 * g[0] / self.shape(*p).rows as f64;
                give(*p, &mut |buf| {
                    for ((x, a), b) in buf.iter_mut().zip(pv).zip(target) {
                        *x += scale * (a - b);
                    }
                })
            }
            Op::Concat(parts) => {
                let rows = node.shape.rows;
                let total = node.shape.cols;
                let mut offset = 0;
                for &part in parts {
                    let w = self.shape(part).cols;
                    give(part, &mut |buf| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut buf[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let full = self.shape(*a).cols;
                let w = node.shape.cols;
                give(*a, &mut |buf| {
                    for r in 0..node.shape.rows {
                        let dst = &mut buf[r * full + start..r * full + start + w];
                        add_into(dst, &g[r * w..(r + 1) * w]);
                    }
                })
            }
            Op::SliceRows(a, start) => {
                let cols = node.shape.cols;
                give(*a, &mut |buf| {
                    add_into(&mut buf[start * cols..start * cols + g.len()], g)
                })
            }
            Op::Gather(table, ids) => {
                let cols = node.shape.cols;
                give(*table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(
                            &mut buf[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                })
            }
            Op::Blend(on, off, mask) => {
                let cols = node.shape.cols;
                for (target, want) in [(*on, true), (*off, false)] {
                    give(target, &mut |buf| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(
                                    &mut buf[r * cols..(r + 1) * cols],
                                    &g[r * cols..(r + 1) * cols],
                                );
                            }
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                give(*a, &mut |buf| {
                    buf.iter_mut().zip(vb).for_each(|(x, y)| *x += g[0] * y)
                });
                give(*b, &mut |buf| {
                    buf.iter_mut().zip(va).for_each(|(x, y)| *x += g[0] * y)
                });
            }
            Op::Sum(a) => give(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.shape(*a).len().max(1) as f64;
                give(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0] / n))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, optionally restricted by a mask.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    if let Some(m) = mask {
        for (x, &keep) in row.iter_mut().zip(m) {
            if !keep {
                *x += MASK_OFFSET;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for (j, x) in row.iter_mut().enumerate() {
        *x = if on(j) { *x / total } else { 0.0 };
    }
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if index < n {
        v[index] = 1.0;
    }
    v
}

#[cfg(test)]
mod tests;
