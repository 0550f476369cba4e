//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its value and enough context to replay the
//! adjoint. `backward` walks the tape once in reverse order; node ids are
//! assigned in execution order, so reverse id order is a reverse topological
//! order. Gradients of leaves accumulate across `backward` calls until
//! `zero_grad`.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{dot, mm_acc, mm_nt_acc, mm_tn_acc, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map `out[i,:] = Σ_j w_ij · x[j,:]`.
///
/// Used for bilinear resampling: upsampling logit grids and gathering
/// features at arbitrary points.
#[derive(Clone, Debug)]
pub struct SparseMap {
    pub n_in: usize,
    pub rows: Vec<Vec<(u32, f32)>>,
}

impl SparseMap {
    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn apply<T: Real>(&self, x: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::ZERO; self.rows.len() * cols];
        for (i, row) in self.rows.iter().enumerate() {
            let o = &mut out[i * cols..(i + 1) * cols];
            for &(j, w) in row {
                let w = T::from_f32(w);
                let src = &x[j as usize * cols..(j as usize + 1) * cols];
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += w * *sv;
                }
            }
        }
        out
    }
}

/// An op whose forward value is computed outside the tape and whose adjoint
/// is supplied by the implementor.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same length as the input's data), or
    /// `None` for inputs that receive no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sparse { x: Var, map: Rc<SparseMap> },
    Clamp { x: Var, lo: f32, hi: f32 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl Tape<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node, present after `backward` for nodes
    /// that require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::from_parts(n.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a);
        let (k2, n) = self.matrix_dims(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(dim_err!("matmul {:?} · {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a);
        let (n, k2) = self.matrix_dims(b);
        if k != k2 {
            return Err(dim_err!("matmul_nt {:?} · {:?}ᵀ", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.matrix_dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, m], out), rg, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(dim_err!("add_row {:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += *bv;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, rg, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let vx = self.value(x);
        let sv = T::from_f32(s);
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| *v * sv).collect());
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let vx = self.value(x);
        let sv = T::from_f32(s);
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| *v + sv).collect());
        let rg = self.rg(x);
        self.push(t, rg, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| v.max(T::ZERO)).collect());
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| sigmoid(*v)).collect());
        let rg = self.rg(x);
        self.push(t, rg, Op::Sigmoid(x))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, rg, Op::Softmax(x))
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(dim_err!("layer_norm over {c} channels with gain {:?}", self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = T::from_f64(rs);
            for j in 0..c {
                let xh = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[r * c + j] = xh;
                out[r * c + j] = g[j] * xh + b[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.to_f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![], vec![T::from_f64(s)]), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().map(|v| v.to_f64()).sum::<f64>() / vx.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![], vec![T::from_f64(s)]), rg, Op::Mean(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if start > end || end > c {
            return Err(dim_err!("slice_cols {start}..{end} of {c}"));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![rows, w], out), rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix_dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p);
            if r != rows {
                return Err(dim_err!("concat_cols row mismatch {r} vs {rows}"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.value(p).cols();
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if start > end || end > rows {
            return Err(dim_err!("slice_rows {start}..{end} of {rows}"));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![end - start, c], out), rg, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(dim_err!("concat_rows col mismatch"));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c.max(1);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_parts(vec![rows, c], out), rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Applies a fixed sparse row-mixing map to a `rows × cols` value.
    pub fn sparse_mix(&mut self, x: Var, map: Rc<SparseMap>) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x);
        if rows != map.n_in {
            return Err(dim_err!("sparse map expects {} rows, got {rows}", map.n_in));
        }
        let out = map.apply(self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![map.n_out(), c], out), rg, Op::Sparse { x, map }))
    }

    /// Elementwise clamp; gradient passes where the input lies inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let vx = self.value(x);
        let (l, h) = (T::from_f32(lo), T::from_f32(hi));
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| v.clamp(l, h)).collect());
        let rg = self.rg(x);
        self.push(t, rg, Op::Clamp { x, lo, hi })
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(output, rg, Op::Custom { inputs: inputs.to_vec(), op })
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates `∂loss/∂node` to every node that requires grad and adds
    /// the result into the leaves' accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = out.cols();
                if self.rg(*a) {
                    mm_nt_acc(g, self.value(*b).data(), slot(grads, self, *a), m, n, k);
                }
                if self.rg(*b) {
                    mm_tn_acc(self.value(*a).data(), g, slot(grads, self, *b), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = out.cols();
                if self.rg(*a) {
                    mm_acc(g, self.value(*b).data(), slot(grads, self, *a), m, n, k);
                }
                if self.rg(*b) {
                    mm_tn_acc(g, self.value(*a).data(), slot(grads, self, *b), m, n, k);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (m, n) = self.matrix_dims(*a);
                    let ga = slot(grads, self, *a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(slot(grads, self, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(slot(grads, self, *a), g);
                }
                if self.rg(*b) {
                    slot(grads, self, *b).iter_mut().zip(g).for_each(|(d, s)| *d -= *s);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b).data();
                    let ga = slot(grads, self, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if self.rg(*b) {
                    let va = self.value(*a).data();
                    let gb = slot(grads, self, *b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    add_into(slot(grads, self, *x), g);
                }
                if self.rg(*bias) {
                    let c = out.cols();
                    let gb = slot(grads, self, *bias);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    let s = T::from_f32(*s);
                    slot(grads, self, *x).iter_mut().zip(g).for_each(|(d, v)| *d += *v * s);
                }
            }
            Op::AddScalar(x) => {
                if self.rg(*x) {
                    add_into(slot(grads, self, *x), g);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x).data();
                    let gx = slot(grads, self, *x);
                    for i in 0..g.len() {
                        if vx[i] > T::ZERO {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = out.data();
                    let gx = slot(grads, self, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (T::ONE - y[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let c = out.cols();
                    let y = out.data();
                    let gx = slot(grads, self, *x);
                    for r in 0..out.rows() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let rows = out.rows();
                if self.rg(*gain) {
                    let gg = slot(grads, self, *gain);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, self, *bias);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain).data();
                    let gx = slot(grads, self, *x);
                    let mut gxh = vec![T::ZERO; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            gxh[j] = g[r * c + j] * gain_v[j];
                            m1 += gxh[j].to_f64();
                            m2 += (gxh[j] * xh[j]).to_f64();
                        }
                        let m1 = T::from_f64(m1 / c as f64);
                        let m2 = T::from_f64(m2 / c as f64);
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (gxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let s = g[0];
                    slot(grads, self, *x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let s = g[0] / T::from_f64(self.value(*x).len().max(1) as f64);
                    slot(grads, self, *x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let c = self.value(*x).cols();
                    let w = out.cols();
                    let gx = slot(grads, self, *x);
                    for r in 0..out.rows() {
                        add_into(&mut gx[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let gp = slot(grads, self, p);
                        for r in 0..out.rows() {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let c = out.cols();
                    let gx = slot(grads, self, *x);
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        add_into(slot(grads, self, p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    add_into(slot(grads, self, *x), g);
                }
            }
            Op::Sparse { x, map } => {
                if self.rg(*x) {
                    let c = out.cols();
                    let gx = slot(grads, self, *x);
                    for (i, row) in map.rows.iter().enumerate() {
                        let gi = &g[i * c..(i + 1) * c];
                        for &(j, w) in row {
                            let w = T::from_f32(w);
                            let dst = &mut gx[j as usize * c..(j as usize + 1) * c];
                            for (d, s) in dst.iter_mut().zip(gi) {
                                *d += w * *s;
                            }
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let vx = self.value(*x).data();
                    let (l, h) = (T::from_f32(*lo), T::from_f32(*hi));
                    let gx = slot(grads, self, *x);
                    for i in 0..g.len() {
                        if vx[i] >= l && vx[i] <= h {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let (true, Some(gi)) = (self.rg(*v), gi) {
                        add_into(slot(grads, self, *v), &gi);
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], tape: &Tape<T>, v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; tape.nodes[v.0].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += v.to_f64();
    }
    let inv = T::from_f64(1.0 / s);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let ones = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(m, ones).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_grad_with_ones() {
        // d/da sum(a·b) with b = ones[k×n] is n everywhere.
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[0.3, -1., 2., 0.5, 0.1, -0.7]));
        let b = tape.constant(Tensor::ones(&[3, 4]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|v| (*v - 4.0).abs() < 1e-6));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1., 1., 1.]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[1, 2], &[0., 2f32.ln()]));
        let y = tape.softmax(x);
        assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-7);
        let x = tape.constant(t(&[1, 2], &[1000., 0.]));
        let y = tape.softmax(x);
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-7 && d[1] < 1e-30);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let d = tape.value(y).data();
        for (v, e) in d.iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
        let x = tape.constant(t(&[1, 3], &[5., 5., 5.]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));

        let g0 = tape.constant(Tensor::zeros(&[3]));
        let bb = tape.constant(t(&[3], &[0.5, -1., 2.]));
        let x = tape.constant(t(&[2, 3], &[1., 7., -3., 0.2, 0.1, 9.]));
        let y = tape.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1., 2., 0.5, -1., 2.]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[2, 3], 0.7));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|v| *v == 1.0));

        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2., 4.]);
        // a second pass accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4., 8.]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_inputs_receive_no_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.param(Tensor::ones(&[2, 2]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_some());
    }
}
