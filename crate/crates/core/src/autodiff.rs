//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Values are
//! referenced through lightweight [`Var`] handles; each operation appends a
//! node whose parents precede it, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Layout is row-major and batch-first. The only broadcasting supported is a
//! vector of length `cols` applied across every row of a `rows x cols`
//! matrix (the right-hand operand of `add`, `sub` and `mul`).

use std::cell::{Cell, RefCell};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it before reuse")]
    AlreadyBackpropagated,
    #[error("{op}: operands were recorded on different tapes")]
    ForeignVar { op: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64`.
///
/// Scalars have an empty shape. Every extent must be positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Gather rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "select_rows",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(AutodiffError::InvalidArgument {
                    op: "select_rows",
                    msg: format!("row {i} out of range for {} rows", self.shape[0]),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![indices.len(), c], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean norm of all entries.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given extents and
    // strides (asserted above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense matrix product of two row-major matrices, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Rows,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    Concat(usize, usize),
    Slice(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single reverse sweep.
///
/// A tape is single-threaded; separate tapes share nothing and can live on
/// separate threads.
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
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
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

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Can run once per tape; call [`Tape::reset`] before recording again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(AutodiffError::ForeignVar { op: "backward" });
        }
        if self.consumed.get() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_node.value.shape.clone()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);

        let shapes = self.nodes.borrow().iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if nodes[a].requires_grad {
                // dA = dC * B^T
                let ga = accumulate(grads, a, m * k);
                gemm(m, n, k, g, (n as isize, 1), &bv.data, (1, n as isize), 1.0, ga);
            }
            if nodes[b].requires_grad {
                // dB = A^T * dC
                let gb = accumulate(grads, b, k * n);
                gemm(k, m, n, &av.data, (1, k as isize), g, (n as isize, 1), 1.0, gb);
            }
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if nodes[a].requires_grad {
                let ga = accumulate(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if nodes[b].requires_grad {
                let len = nodes[b].value.numel();
                let gb = accumulate(grads, b, len);
                match bc {
                    Broadcast::None => gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s),
                    Broadcast::Rows => {
                        for row in g.chunks(len) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += sign * s);
                        }
                    }
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (&nodes[a].value.data, &nodes[b].value.data);
            let len_b = bv.len();
            if nodes[a].requires_grad {
                let ga = accumulate(grads, a, g.len());
                match bc {
                    Broadcast::None => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    Broadcast::Rows => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i % len_b];
                        }
                    }
                }
            }
            if nodes[b].requires_grad {
                let gb = accumulate(grads, b, len_b);
                match bc {
                    Broadcast::None => {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                    Broadcast::Rows => {
                        for i in 0..g.len() {
                            gb[i % len_b] += g[i] * av[i];
                        }
                    }
                }
            }
        }
        Op::Scale(a, c) => unary(nodes, grads, a, g, |_, s| s * c),
        Op::Shift(a) => unary(nodes, grads, a, g, |_, s| s),
        Op::Relu(a) => {
            let o = &out.data;
            unary(nodes, grads, a, g, |i, s| if o[i] > 0.0 { s } else { 0.0 })
        }
        Op::Sigmoid(a) => {
            let o = &out.data;
            unary(nodes, grads, a, g, |i, s| s * o[i] * (1.0 - o[i]))
        }
        Op::Tanh(a) => {
            let o = &out.data;
            unary(nodes, grads, a, g, |i, s| s * (1.0 - o[i] * o[i]))
        }
        Op::Exp(a) => {
            let o = &out.data;
            unary(nodes, grads, a, g, |i, s| s * o[i])
        }
        Op::Log(a) => {
            let x = &nodes[a].value.data;
            unary(nodes, grads, a, g, |i, s| s / x[i])
        }
        Op::Softplus(a) => {
            let x = &nodes[a].value.data;
            unary(nodes, grads, a, g, |i, s| s * sigmoid(x[i]))
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[a].value.data;
            unary(
                nodes,
                grads,
                a,
                g,
                |i, s| if x[i] >= lo && x[i] <= hi { s } else { 0.0 },
            )
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            if !nodes[a].requires_grad {
                return;
            }
            let shape = &nodes[a].value.shape;
            let count = match axis {
                None => nodes[a].value.numel(),
                Some(ax) => shape[ax],
            };
            let scale = if matches!(node.op, Op::Mean(..)) {
                1.0 / count as f64
            } else {
                1.0
            };
            let n = nodes[a].value.numel();
            let ga = accumulate(grads, a, n);
            match (axis, shape.len()) {
                (None, _) | (Some(0), 1) => ga.iter_mut().for_each(|d| *d += g[0] * scale),
                (Some(0), _) => {
                    let c = shape[1];
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i % c] * scale;
                    }
                }
                (Some(_), _) => {
                    let c = shape[1];
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i / c] * scale;
                    }
                }
            }
        }
        Op::Concat(a, b) => {
            let ca = nodes[a].value.cols();
            let cb = nodes[b].value.cols();
            let width = ca + cb;
            if nodes[a].requires_grad {
                let n = nodes[a].value.numel();
                let ga = accumulate(grads, a, n);
                for (r, row) in g.chunks(width).enumerate() {
                    for j in 0..ca {
                        ga[r * ca + j] += row[j];
                    }
                }
            }
            if nodes[b].requires_grad {
                let n = nodes[b].value.numel();
                let gb = accumulate(grads, b, n);
                for (r, row) in g.chunks(width).enumerate() {
                    for j in 0..cb {
                        gb[r * cb + j] += row[ca + j];
                    }
                }
            }
        }
        Op::Slice(a, start) => {
            if !nodes[a].requires_grad {
                return;
            }
            let width = nodes[a].value.cols();
            let len = out.cols();
            let n = nodes[a].value.numel();
            let ga = accumulate(grads, a, n);
            for (r, row) in g.chunks(len).enumerate() {
                for j in 0..len {
                    ga[r * width + start + j] += row[j];
                }
            }
        }
    }
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !nodes[a].requires_grad {
        return;
    }
    let ga = accumulate(grads, a, g.len());
    for (i, (d, &s)) in ga.iter_mut().zip(g).enumerate() {
        *d += f(i, s);
    }
}

/// Result of a reverse sweep, indexed by the variables of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// A copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrow the value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar { op })
        }
    }

    fn emit(&self, op_name: &'static str, data: Vec<f64>, shape: Vec<usize>, op: Op, rg: bool) -> Result<Var<'t>> {
        check_finite(op_name, &data)?;
        Ok(self.tape.push(Tensor { shape, data }, op, rg))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (matmul(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        check_finite("matmul", &out.data)?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other, op_name)?;
        let (data, shape, bc, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (&a.value.shape, &b.value.shape);
            let bc = if sa == sb {
                Broadcast::None
            } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
                Broadcast::Rows
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op: op_name,
                    left: sa.clone(),
                    right: sb.clone(),
                });
            };
            let (av, bv) = (&a.value.data, &b.value.data);
            let data: Vec<f64> = match bc {
                Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Rows => {
                    let n = bv.len();
                    av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
                }
            };
            (data, sa.clone(), bc, a.requires_grad || b.requires_grad)
        };
        self.emit(op_name, data, shape, make(self.id, other.id, bc), rg)
    }

    /// Elementwise sum; `other` may be a row vector broadcast over a batch.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    fn map(&self, op_name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (data, shape, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.value.data.iter().map(|&x| f(x)).collect::<Vec<_>>(),
                a.value.shape.clone(),
                a.requires_grad,
            )
        };
        self.emit(op_name, data, shape, op, rg)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.map("scale", |x| x * c, Op::Scale(self.id, c))
    }

    /// Add a constant to every entry.
    pub fn shift(&self, c: f64) -> Result<Var<'t>> {
        self.map("shift", |x| x + c, Op::Shift(self.id))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.map("log", f64::ln, Op::Log(self.id))
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.map("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.map("clamp", |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        Ok(shape)
    }

    fn reduce(&self, op_name: &'static str, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let shape = match axis {
            Some(ax) => self.check_axis(op_name, ax)?,
            None => self.shape(),
        };
        let (data, out_shape, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let v = &a.value.data;
            let (data, out_shape, count) = match (axis, shape.len()) {
                (None, _) | (Some(0), 1) => (vec![v.iter().sum::<f64>()], vec![], v.len()),
                (Some(0), _) => {
                    let (r, c) = (shape[0], shape[1]);
                    let mut s = vec![0.0; c];
                    for row in v.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    (s, vec![c], r)
                }
                (Some(_), _) => {
                    let c = shape[1];
                    (v.chunks(c).map(|row| row.iter().sum()).collect(), vec![shape[0]], c)
                }
            };
            let data = if mean {
                data.into_iter().map(|x| x / count as f64).collect()
            } else {
                data
            };
            (data, out_shape, a.requires_grad)
        };
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        self.emit(op_name, data, out_shape, op, rg)
    }

    /// Sum over `axis` (0 = down the batch, 1 = across features).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce("sum", Some(axis), false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce("mean", Some(axis), true)
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce("sum", None, false)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce("mean", None, true)
    }

    /// Join along the last axis.
    pub fn concat(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "concat")?;
        let (data, shape, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let compatible = a.shape.len() == b.shape.len()
                && !a.shape.is_empty()
                && (a.shape.len() == 1 || a.shape[0] == b.shape[0])
                && a.shape.len() <= 2;
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (ca, cb) = (a.cols(), b.cols());
            let rows = a.rows();
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = ca + cb;
            (
                data,
                shape,
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        self.emit("concat", data, shape, Op::Concat(self.id, other.id), rg)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (data, shape, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let v = &a.value;
            let width = v.cols();
            if v.shape.is_empty() || v.shape.len() > 2 || len == 0 || start + len > width {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice",
                    msg: format!("range {start}..{} invalid for shape {:?}", start + len, v.shape),
                });
            }
            let mut data = Vec::with_capacity(v.rows() * len);
            for r in 0..v.rows() {
                data.extend_from_slice(&v.data[r * width + start..r * width + start + len]);
            }
            let mut shape = v.shape.clone();
            *shape.last_mut().unwrap() = len;
            (data, shape, a.requires_grad)
        };
        self.emit("slice", data, shape, Op::Slice(self.id, start), rg)
    }
}
