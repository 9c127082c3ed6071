//! Dense-tensor numerical core with reverse-mode automatic differentiation.
//!
//! Tensors are rank-1 or rank-2, row-major, generic over the scalar type.
//! Operations that involve at least one gradient-tracked operand record
//! themselves in the implicit computation graph (parents held by `Rc`), and
//! `backward` on a scalar output populates `grad` on every tracked leaf.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Scalar types the numerical core can run on.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// Additive mask constant that zeroes attention weights after softmax.
    fn neg_mask() -> Self {
        Self::from_f64(-1e9).unwrap()
    }
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Target marker for positions that must not contribute to a loss.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} on {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("target index {index} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddRow(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    MatMul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    Transpose(Tensor<S>),
    ConcatRows(Vec<Tensor<S>>),
    ConcatCols(Vec<Tensor<S>>),
    NarrowRows {
        input: Tensor<S>,
        start: usize,
    },
    Embedding {
        table: Tensor<S>,
        ids: Vec<usize>,
    },
    MeanRows(Tensor<S>),
    Sum(Tensor<S>),
    Softmax {
        input: Tensor<S>,
        output: Vec<S>,
    },
    CrossEntropy {
        logits: Tensor<S>,
        targets: Vec<usize>,
        probs: Vec<S>,
        reduction: Reduction,
        active: usize,
    },
    LayerNorm {
        input: Tensor<S>,
        gain: Tensor<S>,
        bias: Tensor<S>,
        normalized: Vec<S>,
        inv_std: Vec<S>,
    },
    Silu(Tensor<S>),
    Conv2d {
        input: Tensor<S>,
        kernels: Tensor<S>,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
        ksize: usize,
    },
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Option<Op<S>>,
}

/// Shared handle to a node in the computation graph.
pub struct Tensor<S: Scalar = f64>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(RefCell::new(Inner {
            id: fresh_id(),
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} incompatible with {} values",
            shape,
            data.len()
        );
        Tensor::new(shape.to_vec(), data, false, None)
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![S::zero(); shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()], false, None)
    }

    /// A gradient-tracked leaf (model parameter or checked input).
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new(shape.to_vec(), data, true, None)
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn data(&self) -> Vec<S> {
        self.0.borrow().data.clone()
    }

    pub fn item(&self) -> S {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar {:?}", inner.shape);
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite the value buffer in place (optimizer updates, perturbations).
    pub fn set_data(&self, data: Vec<S>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data = data;
    }

    pub fn nudge(&self, index: usize, delta: S) {
        self.0.borrow_mut().data[index] += delta;
    }

    /// Detached copy: same values, no graph history, no gradient tracking.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        Tensor::new(inner.shape.clone(), inner.data.clone(), false, None)
    }

    fn rows_cols(&self) -> (usize, usize) {
        let inner = self.0.borrow();
        match inner.shape.len() {
            1 => (1, inner.shape[0]),
            2 => (inner.shape[0], inner.shape[1]),
            _ => panic!("expected rank 1 or 2, got {:?}", inner.shape),
        }
    }

    // ---- operations ----

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.0.borrow(), rhs.0.borrow());
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<S> = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
        let rg = a.requires_grad || b.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::new(
            shape,
            data,
            rg,
            rg.then(|| Op::Add(self.clone(), rhs.clone())),
        ))
    }

    /// Broadcast a length-`n` row vector over every row of an `[m,n]` matrix.
    pub fn add_row(&self, row: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = self.rows_cols();
        let r = row.0.borrow();
        if r.data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(),
                rhs: r.shape.clone(),
            });
        }
        let a = self.0.borrow();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(a.data[i * n + j] + r.data[j]);
            }
        }
        let rg = a.requires_grad || r.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        drop(r);
        Ok(Tensor::new(
            shape,
            data,
            rg,
            rg.then(|| Op::AddRow(self.clone(), row.clone())),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.0.borrow(), rhs.0.borrow());
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<S> = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
        let rg = a.requires_grad || b.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Ok(Tensor::new(
            shape,
            data,
            rg,
            rg.then(|| Op::Mul(self.clone(), rhs.clone())),
        ))
    }

    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.rows_cols();
        let (k2, n) = rhs.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        let rg = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::new(
            vec![m, n],
            data,
            rg,
            rg.then(|| Op::MatMul(self.clone(), rhs.clone())),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let a = self.0.borrow();
        let data: Vec<S> = a.data.iter().map(|&x| x * c).collect();
        let rg = a.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        Tensor::new(shape, data, rg, rg.then(|| Op::Scale(self.clone(), c)))
    }

    pub fn transpose(&self) -> Tensor<S> {
        let (m, n) = self.rows_cols();
        let a = self.0.borrow();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a.data[i * n + j];
            }
        }
        let rg = a.requires_grad;
        drop(a);
        Tensor::new(vec![n, m], data, rg, rg.then(|| Op::Transpose(self.clone())))
    }

    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = parts[0].rows_cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let (pm, pn) = p.rows_cols();
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            rows += pm;
            rg |= p.requires_grad();
            data.extend_from_slice(&p.0.borrow().data);
        }
        Ok(Tensor::new(
            vec![rows, n],
            data,
            rg,
            rg.then(|| Op::ConcatRows(parts.to_vec())),
        ))
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = parts[0].rows_cols();
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            let (pm, pn) = p.rows_cols();
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            widths.push(pn);
            rg |= p.requires_grad();
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                let inner = p.0.borrow();
                data.extend_from_slice(&inner.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::new(
            vec![m, total],
            data,
            rg,
            rg.then(|| Op::ConcatCols(parts.to_vec())),
        ))
    }

    /// Row slice `[start, start+len)`.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Tensor<S> {
        let (m, n) = self.rows_cols();
        assert!(start + len <= m, "narrow_rows {start}+{len} > {m}");
        let a = self.0.borrow();
        let data = a.data[start * n..(start + len) * n].to_vec();
        let rg = a.requires_grad;
        drop(a);
        Tensor::new(
            vec![len, n],
            data,
            rg,
            rg.then(|| Op::NarrowRows {
                input: self.clone(),
                start,
            }),
        )
    }

    /// Gather rows of `self` (the table) at the given indices.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let (rows, n) = self.rows_cols();
        let a = self.0.borrow();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::TargetOutOfRange {
                    index: id,
                    vocab: rows,
                });
            }
            data.extend_from_slice(&a.data[id * n..(id + 1) * n]);
        }
        let rg = a.requires_grad;
        drop(a);
        Ok(Tensor::new(
            vec![ids.len(), n],
            data,
            rg,
            rg.then(|| Op::Embedding {
                table: self.clone(),
                ids: ids.to_vec(),
            }),
        ))
    }

    /// Mean over the row axis, producing a `[1,n]` tensor.
    pub fn mean_rows(&self) -> Tensor<S> {
        let (m, n) = self.rows_cols();
        let a = self.0.borrow();
        let inv = S::one() / S::from_usize(m).unwrap();
        let mut data = vec![S::zero(); n];
        for i in 0..m {
            for j in 0..n {
                data[j] += a.data[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let rg = a.requires_grad;
        drop(a);
        Tensor::new(vec![1, n], data, rg, rg.then(|| Op::MeanRows(self.clone())))
    }

    pub fn sum(&self) -> Tensor<S> {
        let a = self.0.borrow();
        let total: S = a.data.iter().copied().sum();
        let rg = a.requires_grad;
        drop(a);
        Tensor::new(vec![1], vec![total], rg, rg.then(|| Op::Sum(self.clone())))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Tensor<S> {
        let (m, n) = self.rows_cols();
        let a = self.0.borrow();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let rg = a.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        Tensor::new(
            shape,
            out.clone(),
            rg,
            rg.then(|| Op::Softmax {
                input: self.clone(),
                output: out,
            }),
        )
    }

    /// Negative log-probability of `targets` under row-wise log-softmax of the
    /// logits. Positions with [`IGNORE_INDEX`] contribute zero; `Mean` divides
    /// by the number of active positions.
    pub fn cross_entropy(&self, targets: &[usize], reduction: Reduction) -> Result<Tensor<S>> {
        let (m, v) = self.rows_cols();
        if targets.len() != m {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: format!("{} target rows", m),
                got: vec![targets.len()],
            });
        }
        let a = self.0.borrow();
        let mut probs = vec![S::zero(); m * v];
        let mut loss = S::zero();
        let mut active = 0usize;
        for i in 0..m {
            let row = &a.data[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            let t = targets[i];
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= v {
                return Err(TensorError::TargetOutOfRange { index: t, vocab: v });
            }
            loss -= ((row[t] - mx) - denom.ln()).min(S::zero());
            active += 1;
        }
        if reduction == Reduction::Mean && active > 0 {
            loss /= S::from_usize(active).unwrap();
        }
        let rg = a.requires_grad;
        drop(a);
        Ok(Tensor::new(
            vec![1],
            vec![loss],
            rg,
            rg.then(|| Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
                reduction,
                active,
            }),
        ))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x + bias`.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let (m, n) = self.rows_cols();
        let g = gain.0.borrow();
        let b = bias.0.borrow();
        if g.data.len() != n || b.data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: g.shape.clone(),
            });
        }
        let a = self.0.borrow();
        let mut normalized = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        let inv_n = S::one() / S::from_usize(n).unwrap();
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<S>()
                * inv_n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xhat = (row[j] - mean) * is;
                normalized[i * n + j] = xhat;
                out[i * n + j] = g.data[j] * xhat + b.data[j];
            }
        }
        let rg = a.requires_grad || g.requires_grad || b.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        drop(g);
        drop(b);
        Ok(Tensor::new(
            shape,
            out,
            rg,
            rg.then(|| Op::LayerNorm {
                input: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            }),
        ))
    }

    /// Smooth gated nonlinearity `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<S> {
        let a = self.0.borrow();
        let data: Vec<S> = a
            .data
            .iter()
            .map(|&x| x / (S::one() + (-x).exp()))
            .collect();
        let rg = a.requires_grad;
        let shape = a.shape.clone();
        drop(a);
        Tensor::new(shape, data, rg, rg.then(|| Op::Silu(self.clone())))
    }

    /// Valid-padding stride-1 convolution. `self` is `[in_ch, h*w]`, kernels
    /// are `[out_ch, in_ch*ksize*ksize]`; output is `[out_ch, oh*ow]`.
    pub fn conv2d(
        &self,
        kernels: &Tensor<S>,
        h: usize,
        w: usize,
        ksize: usize,
    ) -> Result<Tensor<S>> {
        let (in_ch, hw) = self.rows_cols();
        let (out_ch, kcols) = kernels.rows_cols();
        if hw != h * w || kcols != in_ch * ksize * ksize || h < ksize || w < ksize {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: format!("input [{in_ch},{}], kernels [*,{}]", h * w, in_ch * ksize * ksize),
                got: vec![in_ch, hw, out_ch, kcols],
            });
        }
        let (oh, ow) = (h - ksize + 1, w - ksize + 1);
        let a = self.0.borrow();
        let k = kernels.0.borrow();
        let mut out = vec![S::zero(); out_ch * oh * ow];
        for oc in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ic in 0..in_ch {
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                acc += a.data[ic * hw + (oy + ky) * w + (ox + kx)]
                                    * k.data[oc * kcols + ic * ksize * ksize + ky * ksize + kx];
                            }
                        }
                    }
                    out[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let rg = a.requires_grad || k.requires_grad;
        drop(a);
        drop(k);
        Ok(Tensor::new(
            vec![out_ch, oh * ow],
            out,
            rg,
            rg.then(|| Op::Conv2d {
                input: self.clone(),
                kernels: kernels.clone(),
                in_ch,
                out_ch,
                h,
                w,
                ksize,
            }),
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into the
    /// `grad` buffers of every tracked tensor reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.0.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NonScalarBackward(inner.shape.clone()));
            }
        }
        let order = topo_order(self);
        accumulate_grad(self, &[S::one()]);
        for node in order.iter().rev() {
            let (grad, op_taken) = {
                let mut inner = node.0.borrow_mut();
                if inner.op.is_none() || inner.grad.is_none() {
                    continue;
                }
                (inner.grad.clone().unwrap(), inner.op.take())
            };
            let op = op_taken.unwrap();
            backprop_op(&op, &grad);
            // keep the graph intact for potential reuse of values, but the op
            // has been consumed; re-store it so repeated backward calls on a
            // fresh loss over shared subgraphs still work
            node.0.borrow_mut().op = Some(op);
        }
        Ok(())
    }
}

/// Row-major `[m,k] x [k,n]` product.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // iterative post-order DFS
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        let id = node.id();
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(id) {
            continue;
        }
        stack.push((node.clone(), true));
        let inner = node.0.borrow();
        if let Some(op) = &inner.op {
            for p in op_parents(op) {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
    }
    order
}

fn op_parents<S: Scalar>(op: &Op<S>) -> Vec<Tensor<S>> {
    match op {
        Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::NarrowRows { input: a, .. }
        | Op::MeanRows(a)
        | Op::Sum(a)
        | Op::Softmax { input: a, .. }
        | Op::Silu(a) => vec![a.clone()],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::Embedding { table, .. } => vec![table.clone()],
        Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        Op::LayerNorm {
            input, gain, bias, ..
        } => vec![input.clone(), gain.clone(), bias.clone()],
        Op::Conv2d { input, kernels, .. } => vec![input.clone(), kernels.clone()],
    }
}

fn accumulate_grad<S: Scalar>(t: &Tensor<S>, delta: &[S]) {
    let mut inner = t.0.borrow_mut();
    if !inner.requires_grad {
        return;
    }
    let n = inner.data.len();
    let grad = inner.grad.get_or_insert_with(|| vec![S::zero(); n]);
    for (g, &d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn backprop_op<S: Scalar>(op: &Op<S>, grad: &[S]) {
    match op {
        Op::Add(a, b) => {
            accumulate_grad(a, grad);
            accumulate_grad(b, grad);
        }
        Op::AddRow(a, row) => {
            accumulate_grad(a, grad);
            let n = row.numel();
            let m = grad.len() / n;
            let mut rg = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    rg[j] += grad[i * n + j];
                }
            }
            accumulate_grad(row, &rg);
        }
        Op::Mul(a, b) => {
            let bd = b.0.borrow().data.clone();
            let ad = a.0.borrow().data.clone();
            let ga: Vec<S> = grad.iter().zip(&bd).map(|(&g, &x)| g * x).collect();
            let gb: Vec<S> = grad.iter().zip(&ad).map(|(&g, &x)| g * x).collect();
            accumulate_grad(a, &ga);
            accumulate_grad(b, &gb);
        }
        Op::MatMul(a, b) => {
            let (m, k) = a.rows_cols();
            let (_, n) = b.rows_cols();
            let ad = a.0.borrow().data.clone();
            let bd = b.0.borrow().data.clone();
            // dA = G · Bᵀ  (computed as G[m,n] with B[k,n] → [m,k])
            let mut ga = vec![S::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += grad[i * n + j] * bd[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            // dB = Aᵀ · G
            let mut gb = vec![S::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == S::zero() {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * grad[i * n + j];
                    }
                }
            }
            accumulate_grad(a, &ga);
            accumulate_grad(b, &gb);
        }
        Op::Scale(a, c) => {
            let ga: Vec<S> = grad.iter().map(|&g| g * *c).collect();
            accumulate_grad(a, &ga);
        }
        Op::Transpose(a) => {
            let (m, n) = a.rows_cols();
            let mut ga = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = grad[j * m + i];
                }
            }
            accumulate_grad(a, &ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                accumulate_grad(p, &grad[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let m = parts[0].rows_cols().0;
            let widths: Vec<usize> = parts.iter().map(|p| p.rows_cols().1).collect();
            let total: usize = widths.iter().sum();
            let mut col_off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let mut gp = vec![S::zero(); m * w];
                for i in 0..m {
                    gp[i * w..(i + 1) * w]
                        .copy_from_slice(&grad[i * total + col_off..i * total + col_off + w]);
                }
                accumulate_grad(p, &gp);
                col_off += w;
            }
        }
        Op::NarrowRows { input, start } => {
            let (m, n) = input.rows_cols();
            let mut gi = vec![S::zero(); m * n];
            gi[start * n..start * n + grad.len()].copy_from_slice(grad);
            accumulate_grad(input, &gi);
        }
        Op::Embedding { table, ids } => {
            let (rows, n) = table.rows_cols();
            let mut gt = vec![S::zero(); rows * n];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..n {
                    gt[id * n + j] += grad[i * n + j];
                }
            }
            accumulate_grad(table, &gt);
        }
        Op::MeanRows(a) => {
            let (m, n) = a.rows_cols();
            let inv = S::one() / S::from_usize(m).unwrap();
            let mut ga = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = grad[j] * inv;
                }
            }
            accumulate_grad(a, &ga);
        }
        Op::Sum(a) => {
            let ga = vec![grad[0]; a.numel()];
            accumulate_grad(a, &ga);
        }
        Op::Softmax { input, output } => {
            let (m, n) = input.rows_cols();
            let mut gi = vec![S::zero(); m * n];
            for i in 0..m {
                let y = &output[i * n..(i + 1) * n];
                let g = &grad[i * n..(i + 1) * n];
                let dot: S = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    gi[i * n + j] = y[j] * (g[j] - dot);
                }
            }
            accumulate_grad(input, &gi);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            reduction,
            active,
        } => {
            let (m, v) = logits.rows_cols();
            let w = match reduction {
                Reduction::Mean if *active > 0 => {
                    grad[0] / S::from_usize(*active).unwrap()
                }
                _ => grad[0],
            };
            let mut gl = vec![S::zero(); m * v];
            for i in 0..m {
                let t = targets[i];
                if t == IGNORE_INDEX {
                    continue;
                }
                for j in 0..v {
                    let indicator = if j == t { S::one() } else { S::zero() };
                    gl[i * v + j] = w * (probs[i * v + j] - indicator);
                }
            }
            accumulate_grad(logits, &gl);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let (m, n) = input.rows_cols();
            let gd = gain.0.borrow().data.clone();
            let inv_n = S::one() / S::from_usize(n).unwrap();
            let mut gi = vec![S::zero(); m * n];
            let mut gg = vec![S::zero(); n];
            let mut gb = vec![S::zero(); n];
            for i in 0..m {
                let xhat = &normalized[i * n..(i + 1) * n];
                let g = &grad[i * n..(i + 1) * n];
                let mut sum_gy = S::zero();
                let mut sum_gy_xhat = S::zero();
                for j in 0..n {
                    let gy = g[j] * gd[j];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat[j];
                    gg[j] += g[j] * xhat[j];
                    gb[j] += g[j];
                }
                for j in 0..n {
                    let gy = g[j] * gd[j];
                    gi[i * n + j] =
                        (gy - sum_gy * inv_n - xhat[j] * sum_gy_xhat * inv_n) * inv_std[i];
                }
            }
            accumulate_grad(input, &gi);
            accumulate_grad(gain, &gg);
            accumulate_grad(bias, &gb);
        }
        Op::Silu(a) => {
            let ad = a.0.borrow().data.clone();
            let ga: Vec<S> = grad
                .iter()
                .zip(&ad)
                .map(|(&g, &x)| {
                    let s = S::one() / (S::one() + (-x).exp());
                    g * (s + x * s * (S::one() - s))
                })
                .collect();
            accumulate_grad(a, &ga);
        }
        Op::Conv2d {
            input,
            kernels,
            in_ch,
            out_ch,
            h,
            w,
            ksize,
        } => {
            let (oh, ow) = (h - ksize + 1, w - ksize + 1);
            let hw = h * w;
            let kcols = in_ch * ksize * ksize;
            let xd = input.0.borrow().data.clone();
            let kd = kernels.0.borrow().data.clone();
            let mut gx = vec![S::zero(); in_ch * hw];
            let mut gk = vec![S::zero(); out_ch * kcols];
            for oc in 0..*out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad[oc * oh * ow + oy * ow + ox];
                        if g == S::zero() {
                            continue;
                        }
                        for ic in 0..*in_ch {
                            for ky in 0..*ksize {
                                for kx in 0..*ksize {
                                    let xi = ic * hw + (oy + ky) * w + (ox + kx);
                                    let ki = oc * kcols + ic * ksize * ksize + ky * ksize + kx;
                                    gx[xi] += g * kd[ki];
                                    gk[ki] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
            accumulate_grad(input, &gx);
            accumulate_grad(kernels, &gk);
        }
    }
}

/// Central-difference gradient check: perturbs `param` coordinate-wise,
/// re-evaluates `loss_fn`, and returns the worst relative error against the
/// autodiff gradient already stored in `param.grad`.
///
/// `coords` limits the sweep to a sampled subset of coordinates; the autodiff
/// gradient must have been produced by `backward` before calling this.
pub fn finite_difference_check<S, F>(
    param: &Tensor<S>,
    coords: &[usize],
    h: S,
    mut loss_fn: F,
) -> S
where
    S: Scalar,
    F: FnMut() -> S,
{
    let analytic = param
        .grad()
        .expect("finite_difference_check: param has no gradient");
    let mut worst = S::zero();
    for &c in coords {
        param.nudge(c, h);
        let up = loss_fn();
        param.nudge(c, -(h + h));
        let down = loss_fn();
        param.nudge(c, h);
        let numeric = (up - down) / (h + h);
        let denom = analytic[c].abs().max(numeric.abs()).max(S::from_f64_c(1e-8));
        let rel = (analytic[c] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
