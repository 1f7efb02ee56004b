//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and backward is a single reverse sweep. Every adjoint
//! rule is written once against the [`Backend`] trait and runs either on raw
//! tensors (ordinary backward) or on the tape itself (`create_graph`), which
//! is what makes gradients of gradients available to an outer loop.

use std::rc::Rc;

use crate::tensor::{self, Result, Tensor, TensorError, Transpose};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var, Transpose),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale · x + shift`
    Affine(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    ColSum(Var),
    RowSum(Var),
    Sum(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Fill(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Mask(Var, Rc<[f64]>),
    SoftmaxRows(Var),
    L2Norm(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    PadCols(Var, usize),
    PadRows(Var, usize),
    Reshape(Var),
    DecayMix {
        w: Var,
        alpha: Var,
        delta: Var,
        eta: Var,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul(a, b, _) | Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Affine(a, _) | AddConst(a) | ColSum(a) | RowSum(a) | Sum(a)
            | BroadcastRows(a) | BroadcastCols(a) | Fill(a) | Sigmoid(a) | Exp(a) | Log(a)
            | Sqrt(a) | Recip(a) | Mask(a, _) | SoftmaxRows(a) | L2Norm(a) | SliceCols(a, _)
            | SliceRows(a, _) | PadCols(a, _) | PadRows(a, _) | Reshape(a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            DecayMix {
                w,
                alpha,
                delta,
                eta,
            } => vec![*w, *alpha, *delta, *eta],
        }
    }

    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        for p in self.parents() {
            f(p);
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The tape. Single-threaded; independent graphs share nothing.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            checked: false,
        }
    }

    /// Rejects any op whose output contains NaN or ±∞.
    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut requires_grad = false;
        if self.recording {
            op.for_each_parent(|p| requires_grad |= self.nodes[p.0].requires_grad);
        }
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`; gradients do not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fresh leaf holding the value of `v`, cutting its history.
    pub fn detach_leaf(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs `f` with recording disabled: everything it creates is constant.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = prev;
        out
    }

    // ── primitive ops ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, b, Transpose::None)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, b, Transpose::Right)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, b, Transpose::Left)
    }

    fn gemm(&mut self, a: Var, b: Var, mode: Transpose) -> Result<Var> {
        let v = tensor::gemm(self.value(a), self.value(b), mode)?;
        self.push(v, Op::MatMul(a, b, mode), "matmul")
    }

    /// `pᵀ q` for row vectors `p: 1 × m`, `q: 1 × n`.
    pub fn outer(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pr, _) = self.dims(p);
        let (qr, _) = self.dims(q);
        if pr != 1 || qr != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "outer",
                left: self.value(p).shape().to_vec(),
                right: self.value(q).shape().to_vec(),
            });
        }
        self.matmul_tn(p, q)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|a| scale * a + shift);
        self.push(v, Op::Affine(x, scale), "affine")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Multiplies every entry of `x` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                left: self.value(x).shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::ScaleBy(x, s), "scale_by")
    }

    /// Adds the `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = tensor::add_row(self.value(x), self.value(row))?;
        self.push(v, Op::AddRow(x, row), "add_row")
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x).zip_map(c, "add_const", |a, b| a + b)?;
        self.push(v, Op::AddConst(x), "add_const")
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let v = tensor::col_sum(self.value(x))?;
        self.push(v, Op::ColSum(x), "col_sum")
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let v = tensor::row_sum(self.value(x))?;
        self.push(v, Op::RowSum(x), "row_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let v = tensor::broadcast_rows(self.value(row), rows)?;
        self.push(v, Op::BroadcastRows(row), "broadcast_rows")
    }

    pub fn broadcast_cols(&mut self, col: Var, cols: usize) -> Result<Var> {
        let v = tensor::broadcast_cols(self.value(col), cols)?;
        self.push(v, Op::BroadcastCols(col), "broadcast_cols")
    }

    /// An `rows × cols` tensor filled with the `1 × 1` node `s`.
    pub fn fill(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = Tensor::filled(rows, cols, self.value(s).item());
        self.push(v, Op::Fill(s), "fill")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mask: Rc<[f64]> = self
            .value(x)
            .data()
            .iter()
            .map(|&a| if a > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mask(x, mask)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), "log")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::sqrt);
        self.push(v, Op::Sqrt(x), "sqrt")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| 1.0 / a);
        self.push(v, Op::Recip(x), "recip")
    }

    /// Elementwise product with a constant mask (ReLU gates, dropout).
    pub fn mask(&mut self, x: Var, mask: Rc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut v = xv.clone();
        for (a, m) in v.data_mut().iter_mut().zip(mask.iter()) {
            *a *= m;
        }
        self.push(v, Op::Mask(x, mask), "mask")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(x))?;
        self.push(v, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Euclidean norm of all entries, as a `1 × 1` node.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).frobenius_norm());
        self.push(v, Op::L2Norm(x), "l2norm")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&vals)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_rows(&vals)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_cols(self.value(x), start, len)?;
        self.push(v, Op::SliceCols(x, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_rows(self.value(x), start, len)?;
        self.push(v, Op::SliceRows(x, start), "slice_rows")
    }

    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let v = tensor::pad_cols(self.value(x), start, total)?;
        self.push(v, Op::PadCols(x, start), "pad_cols")
    }

    pub fn pad_rows(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let v = tensor::pad_rows(self.value(x), start, total)?;
        self.push(v, Op::PadRows(x, start), "pad_rows")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x).reshaped(vec![rows, cols])?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// `(1 − η)·w + η·(α ⊙ Δ)` with `η` a `1 × 1` node.
    pub fn decay_mix(&mut self, w: Var, alpha: Var, delta: Var, eta: Var) -> Result<Var> {
        let e = self.value(eta).item();
        let v = tensor::decay_mix(self.value(w), self.value(alpha), self.value(delta), e)?;
        self.push(
            v,
            Op::DecayMix {
                w,
                alpha,
                delta,
                eta,
            },
            "decay_mix",
        )
    }

    // ── composites ───────────────────────────────────────────────────

    /// Row-wise normalisation to zero mean and unit variance, with `eps`
    /// added to the variance inside the square root.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims(x);
        let s = self.row_sum(x)?;
        let mean = self.scale(s, 1.0 / n as f64)?;
        let mean_b = self.broadcast_cols(mean, n)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let ss = self.row_sum(sq)?;
        let var = self.affine(ss, 1.0 / n as f64, eps)?;
        let sd = self.sqrt(var)?;
        let inv = self.recip(sd)?;
        let inv_b = self.broadcast_cols(inv, n)?;
        self.mul(centered, inv_b)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut shift = Tensor::zeros(r, c);
        for i in 0..r {
            let m = (0..c).map(|j| xv.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            for j in 0..c {
                shift.data_mut()[i * c + j] = -m;
            }
        }
        let z = self.add_const(x, &shift)?;
        let e = self.exp(z)?;
        let s = self.row_sum(e)?;
        let lse = self.log(s)?;
        let lse_b = self.broadcast_cols(lse, c)?;
        self.sub(z, lse_b)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    // ── differentiation ──────────────────────────────────────────────

    /// ∂loss/∂v for every `v` in `wrt`, as plain tensors.
    pub fn gradients(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut backend = RawBackend { graph: self };
        let grads = backprop(&mut backend, loss, wrt)?;
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, &w)| match g {
                Some(g) => Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()),
                None => {
                    let s = self.value(w);
                    Tensor::zeros(s.rows(), s.cols())
                }
            })
            .collect())
    }

    /// ∂loss/∂v as nodes on this graph. With `create_graph` the backward
    /// pass itself is recorded, so the returned gradients can be
    /// differentiated again; otherwise they are constants.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !create_graph {
            let grads = self.gradients(loss, wrt)?;
            return Ok(grads.into_iter().map(|g| self.constant(g)).collect());
        }
        let grads = {
            let mut backend = TapedBackend { graph: self };
            backprop(&mut backend, loss, wrt)?
        };
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, &w)| match g {
                Some(g) => g,
                None => {
                    let (r, c) = self.dims(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Differentiates an outer objective that depends on the gradient of an
    /// inner objective. `outer` receives the taped inner gradients and
    /// builds the outer loss; the result is ∂outer/∂params including the
    /// second-order terms through the inner gradient.
    ///
    /// In first-order mode the inner gradients are detached and this
    /// returns [`TensorError::InnerGradientDetached`] rather than a
    /// silently truncated gradient.
    pub fn grad_of_grad<F>(
        &mut self,
        inner_loss: Var,
        inner_leaves: &[Var],
        second_order: bool,
        outer: F,
        params: &[Var],
    ) -> Result<Vec<Tensor>>
    where
        F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
    {
        let inner = self.grad(inner_loss, inner_leaves, second_order)?;
        if inner.iter().any(|&g| !self.requires_grad(g)) {
            return Err(TensorError::InnerGradientDetached);
        }
        let outer_loss = outer(self, &inner)?;
        self.gradients(outer_loss, params)
    }
}

// ── backends ─────────────────────────────────────────────────────────

/// The operations adjoint rules are expressed in.
trait Backend {
    type T: Clone;
    fn graph(&self) -> &Graph;
    fn node(&mut self, v: Var) -> Self::T;
    fn dims(&self, x: &Self::T) -> (usize, usize);
    fn zeros(&mut self, rows: usize, cols: usize) -> Self::T;
    fn one(&mut self) -> Self::T;
    fn gemm(&mut self, a: &Self::T, b: &Self::T, mode: Transpose) -> Result<Self::T>;
    fn transpose(&mut self, a: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn affine(&mut self, x: &Self::T, scale: f64, shift: f64) -> Result<Self::T>;
    fn scale_by(&mut self, x: &Self::T, s: &Self::T) -> Result<Self::T>;
    fn col_sum(&mut self, x: &Self::T) -> Result<Self::T>;
    fn row_sum(&mut self, x: &Self::T) -> Result<Self::T>;
    fn sum(&mut self, x: &Self::T) -> Result<Self::T>;
    fn broadcast_rows(&mut self, x: &Self::T, rows: usize) -> Result<Self::T>;
    fn broadcast_cols(&mut self, x: &Self::T, cols: usize) -> Result<Self::T>;
    fn fill(&mut self, s: &Self::T, rows: usize, cols: usize) -> Result<Self::T>;
    fn recip(&mut self, x: &Self::T) -> Result<Self::T>;
    fn mask(&mut self, x: &Self::T, m: &Rc<[f64]>) -> Result<Self::T>;
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn slice_rows(&mut self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn pad_cols(&mut self, x: &Self::T, start: usize, total: usize) -> Result<Self::T>;
    fn pad_rows(&mut self, x: &Self::T, start: usize, total: usize) -> Result<Self::T>;
    fn reshape(&mut self, x: &Self::T, rows: usize, cols: usize) -> Result<Self::T>;
    fn accumulate(&mut self, acc: Option<Self::T>, g: Self::T) -> Result<Self::T>;
}

struct RawBackend<'a> {
    graph: &'a Graph,
}

type Rt = Rc<Tensor>;

fn rc(r: Result<Tensor>) -> Result<Rt> {
    r.map(Rc::new)
}

impl Backend for RawBackend<'_> {
    type T = Rt;
    fn graph(&self) -> &Graph {
        self.graph
    }
    fn node(&mut self, v: Var) -> Rt {
        self.graph.nodes[v.0].value.clone()
    }
    fn dims(&self, x: &Rt) -> (usize, usize) {
        (x.rows(), x.cols())
    }
    fn zeros(&mut self, rows: usize, cols: usize) -> Rt {
        Rc::new(Tensor::zeros(rows, cols))
    }
    fn one(&mut self) -> Rt {
        Rc::new(Tensor::scalar(1.0))
    }
    fn gemm(&mut self, a: &Rt, b: &Rt, mode: Transpose) -> Result<Rt> {
        rc(tensor::gemm(a, b, mode))
    }
    fn transpose(&mut self, a: &Rt) -> Result<Rt> {
        rc(tensor::transpose(a))
    }
    fn sub(&mut self, a: &Rt, b: &Rt) -> Result<Rt> {
        rc(a.zip_map(b, "sub", |x, y| x - y))
    }
    fn mul(&mut self, a: &Rt, b: &Rt) -> Result<Rt> {
        rc(a.zip_map(b, "mul", |x, y| x * y))
    }
    fn affine(&mut self, x: &Rt, scale: f64, shift: f64) -> Result<Rt> {
        Ok(Rc::new(x.map(|a| scale * a + shift)))
    }
    fn scale_by(&mut self, x: &Rt, s: &Rt) -> Result<Rt> {
        let c = s.item();
        Ok(Rc::new(x.map(|a| a * c)))
    }
    fn col_sum(&mut self, x: &Rt) -> Result<Rt> {
        rc(tensor::col_sum(x))
    }
    fn row_sum(&mut self, x: &Rt) -> Result<Rt> {
        rc(tensor::row_sum(x))
    }
    fn sum(&mut self, x: &Rt) -> Result<Rt> {
        Ok(Rc::new(Tensor::scalar(x.sum())))
    }
    fn broadcast_rows(&mut self, x: &Rt, rows: usize) -> Result<Rt> {
        rc(tensor::broadcast_rows(x, rows))
    }
    fn broadcast_cols(&mut self, x: &Rt, cols: usize) -> Result<Rt> {
        rc(tensor::broadcast_cols(x, cols))
    }
    fn fill(&mut self, s: &Rt, rows: usize, cols: usize) -> Result<Rt> {
        Ok(Rc::new(Tensor::filled(rows, cols, s.item())))
    }
    fn recip(&mut self, x: &Rt) -> Result<Rt> {
        Ok(Rc::new(x.map(|a| 1.0 / a)))
    }
    fn mask(&mut self, x: &Rt, m: &Rc<[f64]>) -> Result<Rt> {
        let mut out = (**x).clone();
        for (a, k) in out.data_mut().iter_mut().zip(m.iter()) {
            *a *= k;
        }
        Ok(Rc::new(out))
    }
    fn slice_cols(&mut self, x: &Rt, start: usize, len: usize) -> Result<Rt> {
        rc(tensor::slice_cols(x, start, len))
    }
    fn slice_rows(&mut self, x: &Rt, start: usize, len: usize) -> Result<Rt> {
        rc(tensor::slice_rows(x, start, len))
    }
    fn pad_cols(&mut self, x: &Rt, start: usize, total: usize) -> Result<Rt> {
        rc(tensor::pad_cols(x, start, total))
    }
    fn pad_rows(&mut self, x: &Rt, start: usize, total: usize) -> Result<Rt> {
        rc(tensor::pad_rows(x, start, total))
    }
    fn reshape(&mut self, x: &Rt, rows: usize, cols: usize) -> Result<Rt> {
        rc(x.reshaped(vec![rows, cols]))
    }
    fn accumulate(&mut self, acc: Option<Rt>, g: Rt) -> Result<Rt> {
        match acc {
            None => Ok(g),
            Some(mut a) => {
                Rc::make_mut(&mut a).add_assign(&g)?;
                Ok(a)
            }
        }
    }
}

struct TapedBackend<'a> {
    graph: &'a mut Graph,
}

impl Backend for TapedBackend<'_> {
    type T = Var;
    fn graph(&self) -> &Graph {
        self.graph
    }
    fn node(&mut self, v: Var) -> Var {
        v
    }
    fn dims(&self, x: &Var) -> (usize, usize) {
        self.graph.dims(*x)
    }
    fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.graph.constant(Tensor::zeros(rows, cols))
    }
    fn one(&mut self) -> Var {
        self.graph.constant(Tensor::scalar(1.0))
    }
    fn gemm(&mut self, a: &Var, b: &Var, mode: Transpose) -> Result<Var> {
        self.graph.gemm(*a, *b, mode)
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        self.graph.transpose(*a)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.sub(*a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mul(*a, *b)
    }
    fn affine(&mut self, x: &Var, scale: f64, shift: f64) -> Result<Var> {
        self.graph.affine(*x, scale, shift)
    }
    fn scale_by(&mut self, x: &Var, s: &Var) -> Result<Var> {
        self.graph.scale_by(*x, *s)
    }
    fn col_sum(&mut self, x: &Var) -> Result<Var> {
        self.graph.col_sum(*x)
    }
    fn row_sum(&mut self, x: &Var) -> Result<Var> {
        self.graph.row_sum(*x)
    }
    fn sum(&mut self, x: &Var) -> Result<Var> {
        self.graph.sum(*x)
    }
    fn broadcast_rows(&mut self, x: &Var, rows: usize) -> Result<Var> {
        self.graph.broadcast_rows(*x, rows)
    }
    fn broadcast_cols(&mut self, x: &Var, cols: usize) -> Result<Var> {
        self.graph.broadcast_cols(*x, cols)
    }
    fn fill(&mut self, s: &Var, rows: usize, cols: usize) -> Result<Var> {
        self.graph.fill(*s, rows, cols)
    }
    fn recip(&mut self, x: &Var) -> Result<Var> {
        self.graph.recip(*x)
    }
    fn mask(&mut self, x: &Var, m: &Rc<[f64]>) -> Result<Var> {
        self.graph.mask(*x, m.clone())
    }
    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.graph.slice_cols(*x, start, len)
    }
    fn slice_rows(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.graph.slice_rows(*x, start, len)
    }
    fn pad_cols(&mut self, x: &Var, start: usize, total: usize) -> Result<Var> {
        self.graph.pad_cols(*x, start, total)
    }
    fn pad_rows(&mut self, x: &Var, start: usize, total: usize) -> Result<Var> {
        self.graph.pad_rows(*x, start, total)
    }
    fn reshape(&mut self, x: &Var, rows: usize, cols: usize) -> Result<Var> {
        self.graph.reshape(*x, rows, cols)
    }
    fn accumulate(&mut self, acc: Option<Var>, g: Var) -> Result<Var> {
        match acc {
            None => Ok(g),
            Some(a) => self.graph.add(a, g),
        }
    }
}

/// Reverse sweep from `loss` restricted to nodes that are both ancestors of
/// the loss and descendants of some `wrt` node.
fn backprop<B: Backend>(b: &mut B, loss: Var, wrt: &[Var]) -> Result<Vec<Option<B::T>>> {
    let shape = b.graph().value(loss).shape().to_vec();
    if shape != [1, 1] {
        return Err(TensorError::NotScalar { shape });
    }
    let Some(lo) = wrt.iter().map(|v| v.0).min() else {
        return Ok(Vec::new());
    };
    if lo > loss.0 {
        return Ok(vec![None; wrt.len()]);
    }
    let span = loss.0 - lo + 1;
    let mut relevant = vec![false; span];
    for w in wrt {
        if w.0 <= loss.0 && b.graph().requires_grad(*w) {
            relevant[w.0 - lo] = true;
        }
    }
    {
        let nodes = &b.graph().nodes;
        for i in lo..=loss.0 {
            if relevant[i - lo] || !nodes[i].requires_grad {
                continue;
            }
            let mut hit = false;
            nodes[i].op.for_each_parent(|p| hit |= p.0 >= lo && relevant[p.0 - lo]);
            relevant[i - lo] = hit;
        }
    }
    let mut out: Vec<Option<B::T>> = vec![None; wrt.len()];
    if !relevant[loss.0 - lo] {
        return Ok(out);
    }
    let mut grads: Vec<Option<B::T>> = vec![None; span];
    grads[loss.0 - lo] = Some(b.one());
    for i in (lo..=loss.0).rev() {
        if !relevant[i - lo] {
            continue;
        }
        let Some(g) = grads[i - lo].take() else {
            continue;
        };
        for (k, w) in wrt.iter().enumerate() {
            if w.0 == i {
                out[k] = Some(g.clone());
            }
        }
        let op = b.graph().nodes[i].op.clone();
        let need = |p: Var| p.0 >= lo && relevant[p.0 - lo];
        if !op.parents().into_iter().any(need) {
            continue;
        }
        for (p, pg) in vjp(b, Var(i), &op, &g, &need)? {
            let slot = &mut grads[p.0 - lo];
            let acc = slot.take();
            *slot = Some(b.accumulate(acc, pg)?);
        }
    }
    Ok(out)
}

/// Adjoint rules. Returns the gradient contribution for each needed parent.
fn vjp<B: Backend>(
    b: &mut B,
    out: Var,
    op: &Op,
    g: &B::T,
    need: &dyn Fn(Var) -> bool,
) -> Result<Vec<(Var, B::T)>> {
    let mut res = Vec::with_capacity(2);
    match op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(x, y, mode) => {
            let (xv, yv) = (b.node(*x), b.node(*y));
            match mode {
                Transpose::None => {
                    if need(*x) {
                        res.push((*x, b.gemm(g, &yv, Transpose::Right)?));
                    }
                    if need(*y) {
                        res.push((*y, b.gemm(&xv, g, Transpose::Left)?));
                    }
                }
                Transpose::Right => {
                    if need(*x) {
                        res.push((*x, b.gemm(g, &yv, Transpose::None)?));
                    }
                    if need(*y) {
                        res.push((*y, b.gemm(g, &xv, Transpose::Left)?));
                    }
                }
                Transpose::Left => {
                    if need(*x) {
                        res.push((*x, b.gemm(&yv, g, Transpose::Right)?));
                    }
                    if need(*y) {
                        res.push((*y, b.gemm(&xv, g, Transpose::None)?));
                    }
                }
            }
        }
        Op::Transpose(x) => res.push((*x, b.transpose(g)?)),
        Op::Add(x, y) => {
            if need(*x) {
                res.push((*x, g.clone()));
            }
            if need(*y) {
                res.push((*y, g.clone()));
            }
        }
        Op::Sub(x, y) => {
            if need(*x) {
                res.push((*x, g.clone()));
            }
            if need(*y) {
                res.push((*y, b.affine(g, -1.0, 0.0)?));
            }
        }
        Op::Mul(x, y) => {
            if need(*x) {
                let yv = b.node(*y);
                res.push((*x, b.mul(g, &yv)?));
            }
            if need(*y) {
                let xv = b.node(*x);
                res.push((*y, b.mul(g, &xv)?));
            }
        }
        Op::Affine(x, scale) => res.push((*x, b.affine(g, *scale, 0.0)?)),
        Op::ScaleBy(x, s) => {
            if need(*x) {
                let sv = b.node(*s);
                res.push((*x, b.scale_by(g, &sv)?));
            }
            if need(*s) {
                let xv = b.node(*x);
                let prod = b.mul(g, &xv)?;
                res.push((*s, b.sum(&prod)?));
            }
        }
        Op::AddRow(x, row) => {
            if need(*x) {
                res.push((*x, g.clone()));
            }
            if need(*row) {
                res.push((*row, b.col_sum(g)?));
            }
        }
        Op::AddConst(x) => res.push((*x, g.clone())),
        Op::ColSum(x) => {
            let rows = b.graph().dims(*x).0;
            res.push((*x, b.broadcast_rows(g, rows)?));
        }
        Op::RowSum(x) => {
            let cols = b.graph().dims(*x).1;
            res.push((*x, b.broadcast_cols(g, cols)?));
        }
        Op::Sum(x) => {
            let (r, c) = b.graph().dims(*x);
            res.push((*x, b.fill(g, r, c)?));
        }
        Op::BroadcastRows(x) => res.push((*x, b.col_sum(g)?)),
        Op::BroadcastCols(x) => res.push((*x, b.row_sum(g)?)),
        Op::Fill(x) => res.push((*x, b.sum(g)?)),
        Op::Sigmoid(x) => {
            let y = b.node(out);
            let one_minus = b.affine(&y, -1.0, 1.0)?;
            let d = b.mul(&y, &one_minus)?;
            res.push((*x, b.mul(g, &d)?));
        }
        Op::Exp(x) => {
            let y = b.node(out);
            res.push((*x, b.mul(g, &y)?));
        }
        Op::Log(x) => {
            let xv = b.node(*x);
            let inv = b.recip(&xv)?;
            res.push((*x, b.mul(g, &inv)?));
        }
        Op::Sqrt(x) => {
            let y = b.node(out);
            let inv = b.recip(&y)?;
            let half = b.affine(&inv, 0.5, 0.0)?;
            res.push((*x, b.mul(g, &half)?));
        }
        Op::Recip(x) => {
            let y = b.node(out);
            let y2 = b.mul(&y, &y)?;
            let gy2 = b.mul(g, &y2)?;
            res.push((*x, b.affine(&gy2, -1.0, 0.0)?));
        }
        Op::Mask(x, m) => res.push((*x, b.mask(g, m)?)),
        Op::SoftmaxRows(x) => {
            let y = b.node(out);
            let cols = b.dims(&y).1;
            let gy = b.mul(g, &y)?;
            let s = b.row_sum(&gy)?;
            let sb = b.broadcast_cols(&s, cols)?;
            let diff = b.sub(g, &sb)?;
            res.push((*x, b.mul(&y, &diff)?));
        }
        Op::L2Norm(x) => {
            let (r, c) = b.graph().dims(*x);
            if b.graph().scalar(out) == 0.0 {
                // subgradient at the origin
                res.push((*x, b.zeros(r, c)));
            } else {
                let n = b.node(out);
                let xv = b.node(*x);
                let inv = b.recip(&n)?;
                let s = b.mul(g, &inv)?;
                res.push((*x, b.scale_by(&xv, &s)?));
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let w = b.graph().dims(*p).1;
                if need(*p) {
                    res.push((*p, b.slice_cols(g, off, w)?));
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let h = b.graph().dims(*p).0;
                if need(*p) {
                    res.push((*p, b.slice_rows(g, off, h)?));
                }
                off += h;
            }
        }
        Op::SliceCols(x, start) => {
            let total = b.graph().dims(*x).1;
            res.push((*x, b.pad_cols(g, *start, total)?));
        }
        Op::SliceRows(x, start) => {
            let total = b.graph().dims(*x).0;
            res.push((*x, b.pad_rows(g, *start, total)?));
        }
        Op::PadCols(x, start) => {
            let w = b.graph().dims(*x).1;
            res.push((*x, b.slice_cols(g, *start, w)?));
        }
        Op::PadRows(x, start) => {
            let h = b.graph().dims(*x).0;
            res.push((*x, b.slice_rows(g, *start, h)?));
        }
        Op::Reshape(x) => {
            let (r, c) = b.graph().dims(*x);
            res.push((*x, b.reshape(g, r, c)?));
        }
        Op::DecayMix {
            w,
            alpha,
            delta,
            eta,
        } => {
            let e = b.node(*eta);
            if need(*w) {
                let keep = b.affine(&e, -1.0, 1.0)?;
                res.push((*w, b.scale_by(g, &keep)?));
            }
            if need(*alpha) {
                let d = b.node(*delta);
                let gd = b.mul(g, &d)?;
                res.push((*alpha, b.scale_by(&gd, &e)?));
            }
            if need(*delta) {
                let a = b.node(*alpha);
                let ga = b.mul(g, &a)?;
                res.push((*delta, b.scale_by(&ga, &e)?));
            }
            if need(*eta) {
                let (a, d, wv) = (b.node(*alpha), b.node(*delta), b.node(*w));
                let ad = b.mul(&a, &d)?;
                let diff = b.sub(&ad, &wv)?;
                let prod = b.mul(g, &diff)?;
                res.push((*eta, b.sum(&prod)?));
            }
        }
    }
    res.retain(|(p, _)| need(*p));
    Ok(res)
}
