//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation in evaluation order. Nodes are
//! addressed by [`Var`] handles; [`Graph::backward`] walks the tape in
//! reverse from a scalar root and accumulates gradients for every node that
//! depends on a leaf created with `requires_grad`.

use super::activations;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved activations of one SRU layer pass, needed for backpropagation
/// through time.
#[derive(Clone, Debug)]
pub struct SruCache<T> {
    pub r: Vec<T>,
    pub f: Vec<T>,
    pub c_hat: Vec<T>,
    pub c: Vec<T>,
    pub proj: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Square(Var),
    Clamp { a: Var, lo: T, hi: T },
    Sum(Var),
    MaxRows { a: Var, argmax: Vec<usize> },
    ConcatBroadcast { x: Var, e: Var },
    ConcatCols { a: Var, b: Var },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    Gather { a: Var, idx: Vec<usize> },
    Column { a: Var, col: usize },
    Sru { x: Var, wx: Var, b: Var, wh: Var, cache: SruCache<T> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    LogSoftmax(Var),
    Softmax(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Single-threaded; build one per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x · wᵀ + b` for row-major `x` [n×k], `w` [m×k].
fn linear_fwd<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        let xr = &x[r * k..(r + 1) * k];
        let orow = &mut out[r * m..(r + 1) * m];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &w[o * k..(o + 1) * k];
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for (&xv, &wv) in xr.iter().zip(wr) {
                acc = acc + xv * wv;
            }
            *slot = acc;
        }
    }
    out
}

/// Forward pass of one SRU layer over a sequence, starting from a zero cell.
///
/// `x` is [t×d]; `wx` is [3h×d] with row blocks (reset, forget, candidate);
/// `wh` is [h×d]. Returns the hidden states [t×h] and the saved activations.
pub fn sru_forward<T: Real>(
    x: &[T],
    wx: &[T],
    b: &[T],
    wh: &[T],
    t: usize,
    d: usize,
    h: usize,
) -> (Vec<T>, SruCache<T>) {
    let u = linear_fwd(x, wx, Some(b), t, d, 3 * h);
    let proj = linear_fwd(x, wh, None, t, d, h);
    let mut r = vec![T::zero(); t * h];
    let mut f = vec![T::zero(); t * h];
    let mut c_hat = vec![T::zero(); t * h];
    let mut c = vec![T::zero(); t * h];
    let mut out = vec![T::zero(); t * h];
    for step in 0..t {
        let urow = &u[step * 3 * h..(step + 1) * 3 * h];
        for j in 0..h {
            let idx = step * h + j;
            let rg = activations::sigmoid(urow[j]);
            let fg = activations::sigmoid(urow[h + j]);
            let ch = urow[2 * h + j];
            let prev = if step == 0 { T::zero() } else { c[idx - h] };
            let cell = fg * prev + (T::one() - fg) * ch;
            r[idx] = rg;
            f[idx] = fg;
            c_hat[idx] = ch;
            c[idx] = cell;
            out[idx] = rg * cell + (T::one() - rg) * proj[idx];
        }
    }
    (out, SruCache { r, f, c_hat, c, proj })
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// Dense layer `x·Wᵀ + b`. `x` may be a vector [in] (result [out]) or a
    /// batch of rows [n×in] (result [n×out]).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, k) = vx.as_matrix_dims()?;
        let [m, kw] = vw.shape() else {
            return Err(Error::shape("linear", format!("weight must be a matrix, got {:?}", vw.shape())));
        };
        let (m, kw) = (*m, *kw);
        if k != kw {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", vx.shape(), vw.shape())));
        }
        let bias = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [m] {
                    return Err(Error::shape("linear", format!("bias {:?} vs {m} outputs", vb.shape())));
                }
                Some(vb.data())
            }
            None => None,
        };
        let data = linear_fwd(vx.data(), vw.data(), bias, n, k, m);
        let shape = if vx.rank() == 1 { vec![m] } else { vec![n, m] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, data)?, Op::Linear { x, w, b }, rg))
    }

    /// Matrix product `a·b`; a vector `a` [k] is treated as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = va.as_matrix_dims()?;
        let [kb, n] = vb.shape() else {
            return Err(Error::shape("matmul", format!("rhs must be a matrix, got {:?}", vb.shape())));
        };
        let (kb, n) = (*kb, *n);
        if k != kb {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", va.shape(), vb.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = va.data()[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &vb.data()[p * n..(p + 1) * n];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let shape = if va.rank() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Var {
        let neg = self.mul_scalar(a, -T::one());
        self.add_scalar(neg, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, activations::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, activations::relu, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, activations::softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp { a, lo, hi })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Elementwise max over the rows of a [t×h] matrix, giving [h].
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let [t, h] = va.shape() else {
            return Err(Error::shape("max_rows", format!("expected matrix, got {:?}", va.shape())));
        };
        let (t, h) = (*t, *h);
        if t == 0 {
            return Err(Error::Contract("max over an empty sequence".into()));
        }
        let mut best = va.row(0).to_vec();
        let mut argmax = vec![0usize; h];
        for r in 1..t {
            for (j, &v) in va.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(best), Op::MaxRows { a, argmax }, rg))
    }

    /// Appends the vector `e` [k] to every row of `x` [t×d], giving [t×(d+k)].
    pub fn concat_broadcast(&mut self, x: Var, e: Var) -> Result<Var> {
        let vx = self.value(x);
        let ve = self.value(e);
        let [t, d] = vx.shape() else {
            return Err(Error::shape("concat_broadcast", format!("expected matrix, got {:?}", vx.shape())));
        };
        if ve.rank() != 1 {
            return Err(Error::shape("concat_broadcast", format!("expected vector, got {:?}", ve.shape())));
        }
        let (t, d, k) = (*t, *d, ve.len());
        let mut out = Vec::with_capacity(t * (d + k));
        for r in 0..t {
            out.extend_from_slice(vx.row(r));
            out.extend_from_slice(ve.data());
        }
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(Tensor::new(vec![t, d + k], out)?, Op::ConcatBroadcast { x, e }, rg))
    }

    /// Column-wise concatenation of [n×p] and [n×q].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let ([n, p], [nb, q]) = (va.shape(), vb.shape()) else {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        if n != nb {
            return Err(Error::shape("concat_cols", format!("{n} rows vs {nb} rows")));
        }
        let (n, p, q) = (*n, *p, *q);
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols { a, b }, rg))
    }

    /// Concatenation of vectors (scalars count as length one).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() > 1 {
                return Err(Error::shape("concat", format!("expected vectors or scalars, got {:?}", v.shape())));
            }
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Contract("stack of zero rows".into()));
        };
        let width = self.value(first).len();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != width {
                return Err(Error::shape("stack_rows", format!("row {:?} vs width {width}", v.shape())));
            }
            out.extend_from_slice(v.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(Tensor::new(vec![rows.len(), width], out)?, Op::StackRows(rows.to_vec()), rg))
    }

    /// Selects rows of a matrix (with repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let [n, d] = va.shape() else {
            return Err(Error::shape("gather_rows", format!("expected matrix, got {:?}", va.shape())));
        };
        let (n, d) = (*n, *d);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather_rows", format!("row {i} of {n}")));
            }
            out.extend_from_slice(va.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![idx.len(), d], out)?, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Selects elements of a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(Error::shape("gather", format!("expected vector, got {:?}", va.shape())));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let Some(&v) = va.data().get(i) else {
                return Err(Error::shape("gather", format!("index {i} of {}", va.len())));
            };
            out.push(v);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather { a, idx: idx.to_vec() }, rg))
    }

    /// Column `col` of an [n×d] matrix as a vector [n].
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let va = self.value(a);
        let [n, d] = va.shape() else {
            return Err(Error::shape("column", format!("expected matrix, got {:?}", va.shape())));
        };
        if col >= *d {
            return Err(Error::shape("column", format!("column {col} of {d}")));
        }
        let out = (0..*n).map(|r| va.data()[r * d + col]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Column { a, col }, rg))
    }

    /// One SRU layer over a whole sequence `x` [t×d] from a zero cell state.
    pub fn sru(&mut self, x: Var, wx: Var, b: Var, wh: Var) -> Result<Var> {
        let vx = self.value(x);
        let [t, d] = vx.shape() else {
            return Err(Error::shape("sru", format!("input must be [t×d], got {:?}", vx.shape())));
        };
        let (t, d) = (*t, *d);
        let vwh = self.value(wh);
        let [h, dh] = vwh.shape() else {
            return Err(Error::shape("sru", format!("W_h must be a matrix, got {:?}", vwh.shape())));
        };
        let h = *h;
        if *dh != d || self.value(wx).shape() != [3 * h, d] || self.value(b).shape() != [3 * h] {
            return Err(Error::shape(
                "sru",
                format!(
                    "x {:?}, W_x {:?}, b {:?}, W_h {:?}",
                    vx.shape(),
                    self.value(wx).shape(),
                    self.value(b).shape(),
                    vwh.shape()
                ),
            ));
        }
        let (out, cache) = sru_forward(
            vx.data(),
            self.value(wx).data(),
            self.value(b).data(),
            vwh.data(),
            t,
            d,
            h,
        );
        let rg = self.rg(x) || self.rg(wx) || self.rg(b) || self.rg(wh);
        Ok(self.push(Tensor::new(vec![t, h], out)?, Op::Sru { x, wx, b, wh, cache }, rg))
    }

    /// Summed cross-entropy of row-wise softmax(logits) against class labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.as_matrix_dims()?;
        if rows != labels.len() {
            return Err(Error::shape("softmax_xent", format!("{rows} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!("label {bad} outside [0, {cols})")));
        }
        let logp = activations::log_softmax(vl)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -logp.data()[r * cols + l])
            .sum();
        let probs = logp.map(|v| v.exp());
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = activations::log_softmax(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::LogSoftmax(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = activations::softmax(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax(a), rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let g = Tensor::new(self.value(v).shape().to_vec(), data)?;
        self.acc(grads, v, g);
        Ok(())
    }

    fn elementwise_grad(&self, grads: &mut [Option<Tensor<T>>], a: Var, g: &Tensor<T>, f: impl Fn(T, T, T) -> T, out: &Tensor<T>) -> Result<()> {
        if !self.rg(a) {
            return Ok(());
        }
        let va = self.value(a);
        let data = g
            .data()
            .iter()
            .zip(va.data())
            .zip(out.data())
            .map(|((&gv, &x), &y)| f(gv, x, y))
            .collect();
        self.acc_data(grads, a, data)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, k) = vx.as_matrix_dims()?;
                let m = vw.shape()[0];
                let gd = g.data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    for r in 0..n {
                        for o in 0..m {
                            let gv = gd[r * m + o];
                            if gv == T::zero() {
                                continue;
                            }
                            let wr = &vw.data()[o * k..(o + 1) * k];
                            for (d, &wv) in dx[r * k..(r + 1) * k].iter_mut().zip(wr) {
                                *d = *d + gv * wv;
                            }
                        }
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    for r in 0..n {
                        let xr = &vx.data()[r * k..(r + 1) * k];
                        for o in 0..m {
                            let gv = gd[r * m + o];
                            if gv == T::zero() {
                                continue;
                            }
                            for (d, &xv) in dw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                *d = *d + gv * xv;
                            }
                        }
                    }
                    self.acc_data(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); m];
                        for r in 0..n {
                            for (d, &gv) in db.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                                *d = *d + gv;
                            }
                        }
                        self.acc_data(grads, *b, db)?;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.as_matrix_dims()?;
                let n = vb.shape()[1];
                let gd = g.data();
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &vb.data()[p * n..(p + 1) * n];
                            let grow = &gd[r * n..(r + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.acc_data(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                    self.acc_data(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&gv, &y)| gv * y).collect();
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&gv, &x)| gv * x).collect();
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&gv, &y)| gv / y).collect();
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(out.data())
                        .map(|((&gv, &y), &q)| -gv * q / y)
                        .collect();
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.acc(grads, *a, g.map(|v| v * *c)),
            Op::Sigmoid(a) => self.elementwise_grad(grads, *a, g, |gv, _, y| gv * y * (T::one() - y), out)?,
            Op::Relu(a) => self.elementwise_grad(grads, *a, g, |gv, x, _| if x > T::zero() { gv } else { T::zero() }, out)?,
            Op::Softplus(a) => self.elementwise_grad(grads, *a, g, |gv, x, _| gv * activations::sigmoid(x), out)?,
            Op::Sqrt(a) => self.elementwise_grad(grads, *a, g, |gv, _, y| gv / (y + y), out)?,
            Op::Ln(a) => self.elementwise_grad(grads, *a, g, |gv, x, _| gv / x, out)?,
            Op::Exp(a) => self.elementwise_grad(grads, *a, g, |gv, _, y| gv * y, out)?,
            Op::Square(a) => self.elementwise_grad(grads, *a, g, |gv, x, _| gv * (x + x), out)?,
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_grad(grads, *a, g, |gv, x, _| if x < lo || x > hi { T::zero() } else { gv }, out)?
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, Tensor::filled(&shape, gv));
            }
            Op::MaxRows { a, argmax } => {
                let h = argmax.len();
                let t = self.value(*a).shape()[0];
                let mut d = vec![T::zero(); t * h];
                for (j, &r) in argmax.iter().enumerate() {
                    d[r * h + j] = g.data()[j];
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::ConcatBroadcast { x, e } => {
                let [t, d] = self.value(*x).shape() else { unreachable!() };
                let (t, d) = (*t, *d);
                let k = self.value(*e).len();
                let w = d + k;
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(t * d);
                    for r in 0..t {
                        dx.extend_from_slice(&g.data()[r * w..r * w + d]);
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*e) {
                    let mut de = vec![T::zero(); k];
                    for r in 0..t {
                        for (acc, &gv) in de.iter_mut().zip(&g.data()[r * w + d..(r + 1) * w]) {
                            *acc = *acc + gv;
                        }
                    }
                    self.acc_data(grads, *e, de)?;
                }
            }
            Op::ConcatCols { a, b } => {
                let [n, p] = self.value(*a).shape() else { unreachable!() };
                let (n, p) = (*n, *p);
                let q = self.value(*b).shape()[1];
                let w = p + q;
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(n * p);
                    for r in 0..n {
                        da.extend_from_slice(&g.data()[r * w..r * w + p]);
                    }
                    self.acc_data(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(n * q);
                    for r in 0..n {
                        db.extend_from_slice(&g.data()[r * w + p..(r + 1) * w]);
                    }
                    self.acc_data(grads, *b, db)?;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_data(grads, p, g.data()[off..off + len].to_vec())?;
                    off += len;
                }
            }
            Op::StackRows(rows) => {
                let w = g.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    self.acc_data(grads, v, g.data()[r * w..(r + 1) * w].to_vec())?;
                }
            }
            Op::GatherRows { a, idx } => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let d = va.shape()[1];
                    let mut da = vec![T::zero(); va.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &gv) in da[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc = *acc + gv;
                        }
                    }
                    self.acc_data(grads, *a, da)?;
                }
            }
            Op::Gather { a, idx } => {
                if self.rg(*a) {
                    let mut da = vec![T::zero(); self.value(*a).len()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        da[i] = da[i] + gv;
                    }
                    self.acc_data(grads, *a, da)?;
                }
            }
            Op::Column { a, col } => {
                if self.rg(*a) {
                    let va = self.value(*a);
                    let d = va.shape()[1];
                    let mut da = vec![T::zero(); va.len()];
                    for (r, &gv) in g.data().iter().enumerate() {
                        da[r * d + col] = gv;
                    }
                    self.acc_data(grads, *a, da)?;
                }
            }
            Op::Sru { x, wx, b, wh, cache } => self.sru_backward(*x, *wx, *b, *wh, cache, g, grads)?,
            Op::SoftmaxXent { logits, labels, probs } => {
                let gv = g.data()[0];
                let cols = probs.as_matrix_dims()?.1;
                let mut d: Vec<T> = probs.data().iter().map(|&p| p * gv).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] = d[r * cols + l] - gv;
                }
                self.acc_data(grads, *logits, d)?;
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = out.as_matrix_dims()?;
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let total: T = grow.iter().copied().sum();
                    for c in 0..cols {
                        d[r * cols + c] = grow[c] - out.data()[r * cols + c].exp() * total;
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.as_matrix_dims()?;
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let prow = &out.data()[r * cols..(r + 1) * cols];
                    let dot: T = grow.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                    for c in 0..cols {
                        d[r * cols + c] = prow[c] * (grow[c] - dot);
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn sru_backward(
        &self,
        x: Var,
        wx: Var,
        b: Var,
        wh: Var,
        cache: &SruCache<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let vx = self.value(x);
        let (t, d) = (vx.shape()[0], vx.shape()[1]);
        let h = self.value(wh).shape()[0];
        let one = T::one();
        // Gradients w.r.t. the pre-activation gate block [r̂, f̂, ĉ] and the
        // highway projection W_h·x, per time step.
        let mut du = vec![T::zero(); t * 3 * h];
        let mut dproj = vec![T::zero(); t * h];
        let mut carry = vec![T::zero(); h];
        for step in (0..t).rev() {
            for j in 0..h {
                let idx = step * h + j;
                let gh = g.data()[idx];
                let (r, f, ch, c, p) = (cache.r[idx], cache.f[idx], cache.c_hat[idx], cache.c[idx], cache.proj[idx]);
                let prev = if step == 0 { T::zero() } else { cache.c[idx - h] };
                let dc = gh * r + carry[j];
                let dr = gh * (c - p);
                dproj[idx] = gh * (one - r);
                let df = dc * (prev - ch);
                let urow = step * 3 * h;
                du[urow + j] = dr * r * (one - r);
                du[urow + h + j] = df * f * (one - f);
                du[urow + 2 * h + j] = dc * (one - f);
                carry[j] = dc * f;
            }
        }
        let vwx = self.value(wx);
        let vwh = self.value(wh);
        if self.rg(x) {
            let mut dx = vec![T::zero(); t * d];
            for step in 0..t {
                let dxr = &mut dx[step * d..(step + 1) * d];
                for o in 0..3 * h {
                    let gv = du[step * 3 * h + o];
                    if gv == T::zero() {
                        continue;
                    }
                    for (acc, &w) in dxr.iter_mut().zip(&vwx.data()[o * d..(o + 1) * d]) {
                        *acc = *acc + gv * w;
                    }
                }
                for o in 0..h {
                    let gv = dproj[step * h + o];
                    if gv == T::zero() {
                        continue;
                    }
                    for (acc, &w) in dxr.iter_mut().zip(&vwh.data()[o * d..(o + 1) * d]) {
                        *acc = *acc + gv * w;
                    }
                }
            }
            self.acc_data(grads, x, dx)?;
        }
        if self.rg(wx) {
            let mut dw = vec![T::zero(); 3 * h * d];
            for step in 0..t {
                let xr = vx.row(step);
                for o in 0..3 * h {
                    let gv = du[step * 3 * h + o];
                    if gv == T::zero() {
                        continue;
                    }
                    for (acc, &xv) in dw[o * d..(o + 1) * d].iter_mut().zip(xr) {
                        *acc = *acc + gv * xv;
                    }
                }
            }
            self.acc_data(grads, wx, dw)?;
        }
        if self.rg(b) {
            let mut db = vec![T::zero(); 3 * h];
            for step in 0..t {
                for (acc, &gv) in db.iter_mut().zip(&du[step * 3 * h..(step + 1) * 3 * h]) {
                    *acc = *acc + gv;
                }
            }
            self.acc_data(grads, b, db)?;
        }
        if self.rg(wh) {
            let mut dw = vec![T::zero(); h * d];
            for step in 0..t {
                let xr = vx.row(step);
                for o in 0..h {
                    let gv = dproj[step * h + o];
                    if gv == T::zero() {
                        continue;
                    }
                    for (acc, &xv) in dw[o * d..(o + 1) * d].iter_mut().zip(xr) {
                        *acc = *acc + gv * xv;
                    }
                }
            }
            self.acc_data(grads, wh, dw)?;
        }
        Ok(())
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialized as zeros when `v` is unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
