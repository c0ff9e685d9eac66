//! Reverse-mode differentiation over an append-only tape of dense ops.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the backward sweep. Parameters enter the tape
//! through [`Tape::param`] and their gradients come back keyed by
//! [`ParamId`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tensor};
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in compressed-row form, used for neighbourhood
/// aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, w) in row {
                if c >= cols {
                    return Err(Error::Index { index: c, len: cols });
                }
                indices.push(c);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows: rows.len(), cols, indptr, indices, weights })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LnEps(Var, f64),
    LnClamp(Var, f64),
    Softmax { a: Var, temperature: f64 },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, idx: Vec<usize> },
    SpMm { csr: Csr, x: Var },
    ConcatCols(Var, Var),
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Reshape(Var),
    Sum(Var),
    Pick { a: Var, idx: Vec<usize> },
    DotConst { a: Var, w: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::LnEps(..) => "ln_eps",
            Op::LnClamp(..) => "ln_clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather_rows",
            Op::SpMm { .. } => "spmm",
            Op::ConcatCols(..) => "concat_cols",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Pick { .. } => "pick",
            Op::DotConst { .. } => "dot_const",
        }
    }

    fn inputs(&self) -> [Option<Var>; 3] {
        match *self {
            Op::Constant | Op::Param(_) => [None, None, None],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Bmm { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulCol(a, b)
            | Op::ConcatCols(a, b) => [Some(a), Some(b), None],
            Op::LayerNorm { a, gain, bias, .. } => [Some(a), Some(gain), Some(bias)],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LnEps(a, _)
            | Op::LnClamp(a, _)
            | Op::Softmax { a, .. }
            | Op::Gather { table: a, .. }
            | Op::SpMm { x: a, .. }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Pick { a, .. }
            | Op::DotConst { a, .. } => [Some(a), None, None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    check_finite: bool,
    first_non_finite: Option<(&'static str, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite checks are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            check_finite: cfg!(debug_assertions),
            first_non_finite: None,
        }
    }

    /// Forces per-op finite checks regardless of build mode.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// First op that produced a non-finite value, if checks are enabled.
    pub fn check(&self) -> Result<()> {
        match self.first_non_finite {
            Some((op, node)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => op.inputs().iter().flatten().any(|v| self.nodes[v.0].needs_grad),
        };
        if self.check_finite && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((op.name(), self.nodes.len()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.trainable {
            self.push(p.value.clone(), Op::Param(id))
        } else {
            self.push(p.value.clone(), Op::Constant)
        };
        self.params.insert(id, v);
        v
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(op, alloc::format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b))));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(value, op)
    }

    /// `a [.., k] · b [k, n]`, leading axes of `a` kept.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape("matmul", alloc::format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        mm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a [.., k] · b [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", alloc::format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        mm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", alloc::format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt_acc(ab, bb, ob, m, k, n);
            } else {
                mm_acc(ab, bb, ob, m, k, n);
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(Error::shape("add_bias", alloc::format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let c = av.cols();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bv.data()[i % c]).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// Scales row `r` of `a` by `g[r]`; `g` holds one value per row.
    pub fn mul_col(&mut self, a: Var, g: Var) -> Result<Var> {
        let (av, gv) = (self.value(a), self.value(g));
        if gv.len() != av.rows() {
            return Err(Error::shape("mul_col", alloc::format!("{:?} * {:?}", av.shape(), gv.shape())));
        }
        let c = av.cols();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * gv.data()[i / c]).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::MulCol(a, g)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Elementwise product with a constant array (dropout and padding masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::shape("mul_const", alloc::format!("{} vs {}", av.len(), mask.len())));
        }
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::MulConst(a, mask)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), math::tanh)
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        self.map(a, Op::LnEps(a, eps), |x| math::ln(x + eps))
    }

    /// `ln(max(x, eps))`.
    pub fn ln_clamp(&mut self, a: Var, eps: f64) -> Var {
        self.map(a, Op::LnClamp(a, eps), |x| math::ln(if x < eps { eps } else { x }))
    }

    /// Row-wise softmax over the last axis of `a / temperature`. Entries with
    /// `mask[i] == true` are excluded and come out as exactly zero; a row with
    /// every entry excluded is all zeros.
    pub fn softmax(&mut self, a: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("softmax temperature must be positive"));
        }
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.len() {
                return Err(Error::shape("softmax", alloc::format!("mask {} vs {}", m.len(), av.len())));
            }
        }
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for r in 0..av.rows() {
            let span = r * c..(r + 1) * c;
            softmax_row(&av.data()[span.clone()], mask.map(|m| &m[span.clone()]), temperature, &mut out[span]);
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, Op::Softmax { a, temperature }))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
        let c = av.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", alloc::format!("{:?} with gain {:?}", av.shape(), gv.shape())));
        }
        let rows = av.rows();
        let mut xhat = vec![0.0; av.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; av.len()];
        for r in 0..rows {
            let x = &av.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..c {
                let h = (x[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { a, gain, bias, xhat, rstd }))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        let (rows, c) = (tv.rows(), tv.cols());
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new([idx.len(), c], out)?;
        Ok(self.push(value, Op::Gather { table, idx }))
    }

    /// Constant sparse matrix times `x [csr.cols, c]`.
    pub fn spmm(&mut self, csr: Csr, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != csr.cols {
            return Err(Error::shape("spmm", alloc::format!("csr {}x{} x {:?}", csr.rows, csr.cols, xv.shape())));
        }
        let c = xv.cols();
        let mut out = vec![0.0; csr.rows * c];
        for r in 0..csr.rows {
            let o = &mut out[r * c..(r + 1) * c];
            for (col, w) in csr.row(r) {
                for (oj, xj) in o.iter_mut().zip(xv.row(col)) {
                    *oj += w * xj;
                }
            }
        }
        let value = Tensor::new([csr.rows, c], out)?;
        Ok(self.push(value, Op::SpMm { csr, x }))
    }

    /// Joins two row-aligned matrices side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols", alloc::format!("{:?} | {:?}", av.shape(), bv.shape())));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new([av.rows(), ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// `[B, n, heads·w] -> [B·heads, n, w]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", alloc::format!("{s:?} into {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let w = d / heads;
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let src = &av.data()[(bi * n + i) * d + h * w..][..w];
                    out[((bi * heads + h) * n + i) * w..][..w].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new([b * heads, n, w], out)?;
        Ok(self.push(value, Op::SplitHeads { a, heads }))
    }

    /// `[B·heads, n, w] -> [B, n, heads·w]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", alloc::format!("{s:?} from {heads} heads")));
        }
        let (bh, n, w) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = heads * w;
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let src = &av.data()[((bi * heads + h) * n + i) * w..][..w];
                    out[(bi * n + i) * d + h * w..][..w].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new([b, n, d], out)?;
        Ok(self.push(value, Op::MergeHeads { a, heads }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers individual elements by flat index.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            out.push(*av.data().get(i).ok_or(Error::Index { index: i, len: av.len() })?);
        }
        let value = Tensor::new([idx.len()], out)?;
        Ok(self.push(value, Op::Pick { a, idx }))
    }

    /// `Σ w_i a_i` with constant weights.
    pub fn dot_const(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if w.len() != av.len() {
            return Err(Error::shape("dot_const", alloc::format!("{} vs {}", av.len(), w.len())));
        }
        let s = av.data().iter().zip(&w).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { a, w }))
    }

    /// Runs the backward sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must have exactly one element"));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite { op: self.nodes[loss.0].op.name(), node: loss.0 });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for &v in self.params.values() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[v.0].op, &grads[v.0]) {
                by_param.insert(*id, g.clone());
            }
        }
        Ok(Gradients { nodes: grads, by_param })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, a) {
                    mm_nt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    mm_tn_acc(av.data(), g, gb, m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.acc(grads, a) {
                    mm_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    mm_tn_acc(g, av.data(), gb, m, n, k);
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            mm_acc(gi, bb, gai, m, n, k);
                        } else {
                            mm_nt_acc(gi, bb, gai, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av.data()[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            mm_tn_acc(gi, ab, gbi, m, n, k);
                        } else {
                            mm_tn_acc(ab, gi, gbi, m, k, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    let c = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % c] += x;
                    }
                }
            }
            &Op::MulCol(a, col) => {
                let (av, cv) = (self.value(a), self.value(col));
                let c = av.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for (i, &x) in g.iter().enumerate() {
                        ga[i] += x * cv.data()[i / c];
                    }
                }
                if let Some(gc) = self.acc(grads, col) {
                    for (i, &x) in g.iter().enumerate() {
                        gc[i / c] += x * av.data()[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            &Op::Relu(a) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            &Op::Tanh(a) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            &Op::LnEps(a, eps) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / (av[i] + eps);
                    }
                }
            }
            &Op::LnClamp(a, eps) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        if av[i] >= eps {
                            ga[i] += g[i] / av[i];
                        }
                    }
                }
            }
            &Op::Softmax { a, temperature } => {
                let y = out.data();
                let c = out.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..out.rows() {
                        let span = r * c..(r + 1) * c;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (j, gaj) in ga[span].iter_mut().enumerate() {
                            *gaj += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let gr = &g[span.clone()];
                        let xr = &xhat[span.clone()];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for (j, gaj) in ga[span].iter_mut().enumerate() {
                            let d = gr[j] * gv[j];
                            *gaj += rs * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (i, &x) in g.iter().enumerate() {
                        gg[i % c] += x * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % c] += x;
                    }
                }
            }
            Op::Gather { table, idx } => {
                let c = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SpMm { csr, x } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..csr.rows {
                        let gr = &g[r * c..(r + 1) * c];
                        for (col, w) in csr.row(r) {
                            for (a, b) in gx[col * c..(col + 1) * c].iter_mut().zip(gr) {
                                *a += w * b;
                            }
                        }
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                let rows = out.rows();
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for r in 0..rows {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
            }
            &Op::SplitHeads { a, heads } => {
                let s = self.value(a).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let w = d / heads;
                if let Some(ga) = self.acc(grads, a) {
                    for bi in 0..b {
                        for i in 0..n {
                            for h in 0..heads {
                                add_into(
                                    &mut ga[(bi * n + i) * d + h * w..][..w],
                                    &g[((bi * heads + h) * n + i) * w..][..w],
                                );
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, heads } => {
                let s = self.value(a).shape();
                let (bh, n, w) = (s[0], s[1], s[2]);
                let d = heads * w;
                if let Some(ga) = self.acc(grads, a) {
                    for bi in 0..bh / heads {
                        for i in 0..n {
                            for h in 0..heads {
                                add_into(
                                    &mut ga[((bi * heads + h) * n + i) * w..][..w],
                                    &g[(bi * n + i) * d + h * w..][..w],
                                );
                            }
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Pick { a, idx } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[i] += g[r];
                    }
                }
            }
            Op::DotConst { a, w } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &wi) in ga.iter_mut().zip(w) {
                        *x += g[0] * wi;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients from one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a trainable parameter, `None` if it did not influence the
    /// loss.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|g| g.as_slice())
    }

    /// Gradient with respect to any node that needs one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Builds a gradient set directly, for callers that accumulate their own.
    pub fn from_params(by_param: BTreeMap<ParamId, Vec<f64>>) -> Self {
        Self { nodes: Vec::new(), by_param }
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f64>> {
        self.by_param
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn softmax_row(x: &[f64], mask: Option<&[bool]>, temperature: f64, out: &mut [f64]) {
    let keep = |j: usize| mask.map_or(true, |m| !m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if keep(j) { math::exp((v - max) / temperature) } else { 0.0 };
        total += out[j];
    }
    out.iter_mut().for_each(|v| *v /= total);
}
