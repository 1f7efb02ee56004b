//! Dense row-major tensors of `f64` and the raw kernels the autodiff graph
//! is built on.
//!
//! Every tensor that flows through the graph is rank 2. Vectors are stored
//! as `1 × n` rows and scalars as `1 × 1`, so all shapes stay explicit and
//! there is no broadcasting beyond the named row/column operations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("inner gradient detached: second-order gradients were requested but the inner pass ran in first-order mode")]
    InnerGradientDetached,
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![1, n],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
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

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

// ── kernels ──────────────────────────────────────────────────────────

/// Which operands of a product are read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    None,
    /// `a · bᵀ`
    Right,
    /// `aᵀ · b`
    Left,
}

pub fn gemm(a: &Tensor, b: &Tensor, mode: Transpose) -> Result<Tensor> {
    let (ar, ac) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    // logical (m × k) · (k × n) plus element strides of each operand
    let (m, k, rsa, csa) = match mode {
        Transpose::Left => (ac, ar, 1isize, ac as isize),
        _ => (ar, ac, ac as isize, 1isize),
    };
    let (k2, n, rsb, csb) = match mode {
        Transpose::Right => (bc, br, 1isize, bc as isize),
        _ => (br, bc, bc as isize, 1isize),
    };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: the pointers cover exactly the (m × k), (k × n) and (m × n)
    // extents described by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    Ok(Tensor::from_fn(c, r, |i, j| a.data[j * c + i]))
}

/// `x + row` with `row` of shape `1 × n` added to every row of `x`.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("add_row")?;
    if row.shape != [1, c] {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            left: x.shape.clone(),
            right: row.shape.clone(),
        });
    }
    let mut out = x.clone();
    for i in 0..r {
        for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn col_sum(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("col_sum")?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&x.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Ok(Tensor::row(out))
}

pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("row_sum")?;
    let data = (0..r).map(|i| x.data[i * c..(i + 1) * c].iter().sum()).collect();
    Tensor::matrix(r, 1, data)
}

pub fn broadcast_rows(row: &Tensor, rows: usize) -> Result<Tensor> {
    let (r, c) = row.dims2("broadcast_rows")?;
    if r != 1 {
        return Err(TensorError::Contract(format!(
            "broadcast_rows expects a 1 × n row, got {:?}",
            row.shape
        )));
    }
    let mut data = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        data.extend_from_slice(&row.data);
    }
    Tensor::matrix(rows, c, data)
}

pub fn broadcast_cols(col: &Tensor, cols: usize) -> Result<Tensor> {
    let (r, c) = col.dims2("broadcast_cols")?;
    if c != 1 {
        return Err(TensorError::Contract(format!(
            "broadcast_cols expects an m × 1 column, got {:?}",
            col.shape
        )));
    }
    Ok(Tensor::from_fn(r, cols, |i, _| col.data[i]))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2("softmax_rows")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.dims2("slice_cols")?;
    if start + len > c || len == 0 {
        return Err(TensorError::OutOfRange {
            op: "slice_cols",
            start,
            end: start + len,
            extent: c,
        });
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
    }
    Tensor::matrix(r, len, data)
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.dims2("slice_rows")?;
    if start + len > r || len == 0 {
        return Err(TensorError::OutOfRange {
            op: "slice_rows",
            start,
            end: start + len,
            extent: r,
        });
    }
    Tensor::matrix(len, c, x.data[start * c..(start + len) * c].to_vec())
}

/// Embeds `x` into a zero matrix with `total` columns starting at `start`.
pub fn pad_cols(x: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let (r, c) = x.dims2("pad_cols")?;
    if start + c > total {
        return Err(TensorError::OutOfRange {
            op: "pad_cols",
            start,
            end: start + c,
            extent: total,
        });
    }
    let mut out = Tensor::zeros(r, total);
    for i in 0..r {
        out.data[i * total + start..i * total + start + c].copy_from_slice(&x.data[i * c..(i + 1) * c]);
    }
    Ok(out)
}

pub fn pad_rows(x: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let (r, c) = x.dims2("pad_rows")?;
    if start + r > total {
        return Err(TensorError::OutOfRange {
            op: "pad_rows",
            start,
            end: start + r,
            extent: total,
        });
    }
    let mut out = Tensor::zeros(total, c);
    out.data[start * c..(start + r) * c].copy_from_slice(&x.data);
    Ok(out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?
        .dims2("concat_cols")?
        .0;
    let mut total = 0;
    for p in parts {
        let (pr, pc) = p.dims2("concat_cols")?;
        if pr != r {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: parts[0].shape.clone(),
                right: p.shape.clone(),
            });
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let pc = p.cols();
            data.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
        }
    }
    Tensor::matrix(r, total, data)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?
        .dims2("concat_rows")?
        .1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.dims2("concat_rows")?;
        if pc != c {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: parts[0].shape.clone(),
                right: p.shape.clone(),
            });
        }
        rows += pr;
        data.extend_from_slice(&p.data);
    }
    Tensor::matrix(rows, c, data)
}

/// `(1 − η)·w + η·(α ⊙ Δ)`, the fast-weight update shared by both rules.
pub fn decay_mix(w: &Tensor, alpha: &Tensor, delta: &Tensor, eta: f64) -> Result<Tensor> {
    same_shape("decay_mix", w, alpha)?;
    same_shape("decay_mix", w, delta)?;
    let keep = 1.0 - eta;
    let data = w
        .data
        .iter()
        .zip(&alpha.data)
        .zip(&delta.data)
        .map(|((&w, &a), &d)| keep * w + eta * (a * d))
        .collect();
    Ok(Tensor {
        shape: w.shape.clone(),
        data,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
