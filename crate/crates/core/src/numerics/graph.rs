//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! parameters (tracked for gradients) or constants. Each operation appends a
//! node holding its output value and the recipe needed to push gradients back
//! to its inputs. [`Graph::backward`] walks the tape in reverse once.

use super::tensor::{cholesky_lower, gemm, solve_lower, solve_lower_transpose, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
    LeftRow,
    RightRow,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var, Bcast),
    MatMul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LogSumExpLast(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    L2Norm(Var),
    Transpose(Var),
    Reshape(Var),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    Diag(Var),
    NormalizeRows(Var),
    LowerFactor(Var),
    Cholesky(Var),
    TriSolveLower(Var, Var),
    Matern52 { a: Var, b: Var, lengthscale: Var, scale: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Positive floor added to softplus-parameterized diagonals.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Gradient tape. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bcast_of(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.len() == 1 {
        Ok(Bcast::RightScalar)
    } else if a.len() == 1 {
        Ok(Bcast::LeftScalar)
    } else if b.rank() == 1 && a.rank() >= 1 && a.last_dim() == b.len() {
        Ok(Bcast::RightRow)
    } else if a.rank() == 1 && b.rank() >= 1 && b.last_dim() == a.len() {
        Ok(Bcast::LeftRow)
    } else {
        Err(shape_err(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

impl Bcast {
    /// Index maps from output element to (left, right) element.
    fn maps(self, a: &Tensor, b: &Tensor) -> (Vec<usize>, usize, usize, usize) {
        // returns (out shape dims product via len), modulus for a, modulus for b
        let (out_shape, ma, mb) = match self {
            Bcast::Same => (a.shape().to_vec(), usize::MAX, usize::MAX),
            Bcast::RightScalar => (a.shape().to_vec(), usize::MAX, 1),
            Bcast::LeftScalar => (b.shape().to_vec(), 1, usize::MAX),
            Bcast::RightRow => (a.shape().to_vec(), usize::MAX, b.len()),
            Bcast::LeftRow => (b.shape().to_vec(), a.len(), usize::MAX),
        };
        let n = out_shape.iter().product();
        (out_shape, n, ma, mb)
    }
}

#[inline]
fn idx(i: usize, m: usize) -> usize {
    if m == usize::MAX {
        i
    } else {
        i % m
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Parameter leaves in creation order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf tracked for gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, kind: BinKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast_of(op, ta, tb)?;
        let (shape, n, ma, mb) = bc.maps(ta, tb);
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (da[idx(i, ma)], db[idx(i, mb)]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b, bc), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `max(a, floor)` elementwise; no gradient where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    fn rows_of(&self, a: Var) -> (usize, usize) {
        let t = self.value(a);
        let c = t.last_dim();
        (t.len() / c, c)
    }

    fn reduced_shape(t: &Tensor) -> Vec<usize> {
        let s = t.shape();
        if s.is_empty() {
            Vec::new()
        } else {
            s[..s.len() - 1].to_vec()
        }
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_of(a);
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxLast(a), ng)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_of(a);
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let lse = lse_slice(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxLast(a), ng)
    }

    /// `log(sum(exp(x)))` over the last axis, computed with the max shift.
    pub fn log_sum_exp_last(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_of(a);
        let t = self.value(a);
        let data = (0..r).map(|i| lse_slice(&t.data()[i * c..(i + 1) * c])).collect();
        let out = Tensor::new(Self::reduced_shape(t), data).expect("reduced shape");
        let ng = self.ng(a);
        self.push(out, Op::LogSumExpLast(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_of(a);
        let t = self.value(a);
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::new(Self::reduced_shape(t), data).expect("reduced shape");
        let ng = self.ng(a);
        self.push(out, Op::SumLast(a), ng)
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::L2Norm(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        if start >= end || end > c || t.rank() == 0 {
            return Err(shape_err(
                "slice_last",
                format!("range {start}..{end} out of bounds for shape {:?}", t.shape()),
            ));
        }
        let r = t.len() / c;
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceLast(a, start), ng))
    }

    /// Concatenates tensors along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_last", "no inputs".into()))?;
        let lead = Self::reduced_shape(self.value(*first));
        let r: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || Self::reduced_shape(t) != lead {
                return Err(shape_err(
                    "concat_last",
                    format!("leading dims {:?} vs {:?}", lead, t.shape()),
                ));
            }
            total += t.last_dim();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                let c = t.last_dim();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatLast(parts.to_vec()), ng))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("diag")?;
        if r != c {
            return Err(shape_err("diag", format!("non-square {:?}", t.shape())));
        }
        let data = (0..r).map(|i| t.data()[i * c + i]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(data), Op::Diag(a), ng))
    }

    /// Scales each row to unit length; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("normalize_rows")?;
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::NormalizeRows(a), ng))
    }

    /// Lower-triangular factor from an unconstrained square matrix: strict
    /// lower part copied, diagonal mapped through `softplus + DIAG_FLOOR`.
    pub fn lower_factor(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("lower_factor")?;
        if r != c {
            return Err(shape_err("lower_factor", format!("non-square {:?}", t.shape())));
        }
        let mut data = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..i {
                data[i * r + j] = t.data()[i * r + j];
            }
            data[i * r + i] = softplus(t.data()[i * r + i]) + DIAG_FLOOR;
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![r, r], data)?, Op::LowerFactor(a), ng))
    }

    /// Lower Cholesky factor. Reads only the lower triangle of `a`.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("cholesky")?;
        if r != c {
            return Err(shape_err("cholesky", format!("non-square {:?}", t.shape())));
        }
        let l = cholesky_lower(t.data(), r).ok_or(Error::NotPositiveDefinite { size: r })?;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![r, r], l)?, Op::Cholesky(a), ng))
    }

    /// `L^{-1} B` for lower-triangular `L`.
    pub fn tri_solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let (tl, tb) = (self.value(l), self.value(b));
        let (n, n2) = tl.dims2("tri_solve_lower")?;
        let (bn, m) = tb.dims2("tri_solve_lower")?;
        if n != n2 || bn != n {
            return Err(shape_err(
                "tri_solve_lower",
                format!("L {:?} with B {:?}", tl.shape(), tb.shape()),
            ));
        }
        let mut x = tb.data().to_vec();
        solve_lower(tl.data(), n, &mut x, m);
        let ng = self.ng(l) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], x)?, Op::TriSolveLower(l, b), ng))
    }

    /// Matérn-5/2 cross-covariance between the rows of `a` (n x d) and `b`
    /// (m x d) with scalar `lengthscale` and signal variance `scale`.
    pub fn matern52(&mut self, a: Var, b: Var, lengthscale: Var, scale: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = ta.dims2("matern52")?;
        let (m, d2) = tb.dims2("matern52")?;
        if d != d2 || !self.value(lengthscale).is_scalar() || !self.value(scale).is_scalar() {
            return Err(shape_err(
                "matern52",
                format!(
                    "inputs {:?}, {:?}, lengthscale {:?}, scale {:?}",
                    ta.shape(),
                    tb.shape(),
                    self.value(lengthscale).shape(),
                    self.value(scale).shape()
                ),
            ));
        }
        let ell = self.value(lengthscale).item();
        let sf2 = self.value(scale).item();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                let r = dist(ra, tb.row(j));
                out[i * m + j] = matern52_value(r, ell, sf2);
            }
        }
        let ng = self.ng(a) || self.ng(b) || self.ng(lengthscale) || self.ng(scale);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Matern52 { a, b, lengthscale, scale },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves keep their gradients visible to callers.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (_, n, ma, mb) = bc.maps(ta, tb);
                let (da, db) = (ta.data(), tb.data());
                let kind = *kind;
                self.acc_with(grads, *a, |ga| {
                    for k in 0..n {
                        let (ia, ib) = (idx(k, ma), idx(k, mb));
                        ga[ia] += gd[k]
                            * match kind {
                                BinKind::Add | BinKind::Sub => 1.0,
                                BinKind::Mul => db[ib],
                                BinKind::Div => 1.0 / db[ib],
                            };
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for k in 0..n {
                        let (ia, ib) = (idx(k, ma), idx(k, mb));
                        gb[ib] += gd[k]
                            * match kind {
                                BinKind::Add => 1.0,
                                BinKind::Sub => -1.0,
                                BinKind::Mul => da[ia],
                                BinKind::Div => -da[ia] / (db[ib] * db[ib]),
                            };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, tb.data(), true, &mut da, 0.0);
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, ta.data(), true, gd, false, &mut db, 0.0);
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Neg(a) => self.acc(grads, *a, self.like(*a, gd.iter().map(|x| -x).collect())),
            Op::Scale(a, c) => {
                self.acc(grads, *a, self.like(*a, gd.iter().map(|x| c * x).collect()))
            }
            Op::Shift(a) | Op::Reshape(a) => self.acc(grads, *a, self.like(*a, gd.to_vec())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Sqrt(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > *floor { *g } else { 0.0 }).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::SoftmaxLast(a) => {
                let c = out.last_dim();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let s = r * c;
                    let dot: f64 = (s..s + c).map(|j| gd[j] * y[j]).sum();
                    for j in s..s + c {
                        d[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::LogSoftmaxLast(a) => {
                let c = out.last_dim();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let s = r * c;
                    let tot: f64 = gd[s..s + c].iter().sum();
                    for j in s..s + c {
                        d[j] = gd[j] - y[j].exp() * tot;
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::LogSumExpLast(a) => {
                let x = self.value(*a);
                let c = x.last_dim();
                let mut d = vec![0.0; x.len()];
                for r in 0..x.len() / c {
                    for j in r * c..(r + 1) * c {
                        d[j] = gd[r] * (x.data()[j] - out.data()[r]).exp();
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, self.like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::SumLast(a) => {
                let x = self.value(*a);
                let c = x.last_dim();
                let d = (0..x.len()).map(|j| gd[j / c]).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::L2Norm(a) => {
                let n = out.item();
                let x = self.value(*a).data();
                let d = x.iter().map(|x| if n > 0.0 { gd[0] * x / n } else { 0.0 }).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Transpose(a) => {
                let t = g.transpose2().expect("2-d gradient");
                self.acc(grads, *a, t);
            }
            Op::SliceLast(a, start) => {
                let (c, w) = (self.value(*a).last_dim(), out.last_dim());
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    for r in 0..gd.len() / w {
                        for j in 0..w {
                            ga[r * c + start + j] += gd[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total;
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.acc_with(grads, p, |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gd[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Diag(a) => {
                let n = gd.len();
                self.acc_with(grads, *a, |ga| {
                    for k in 0..n {
                        ga[k * n + k] += gd[k];
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let c = x.last_dim();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let s = r * c;
                    let norm = x.data()[s..s + c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = (s..s + c).map(|j| y[j] * gd[j]).sum();
                    for j in s..s + c {
                        d[j] = (gd[j] - y[j] * dot) / norm;
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::LowerFactor(a) => {
                let x = self.value(*a).data();
                let n = out.shape()[0];
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..i {
                        d[i * n + j] = gd[i * n + j];
                    }
                    d[i * n + i] = gd[i * n + i] * sigmoid(x[i * n + i]);
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Cholesky(a) => {
                let n = out.shape()[0];
                let l = out.data();
                // P = Phi(L^T Lbar): lower triangle with the diagonal halved.
                let mut p = vec![0.0; n * n];
                gemm(n, n, n, l, true, gd, false, &mut p, 0.0);
                for i in 0..n {
                    for j in (i + 1)..n {
                        p[i * n + j] = 0.0;
                    }
                    p[i * n + i] *= 0.5;
                }
                // S = L^{-T} P L^{-1}
                solve_lower_transpose(l, n, &mut p, n);
                let mut pt = transpose_vec(&p, n);
                solve_lower_transpose(l, n, &mut pt, n);
                let s = transpose_vec(&pt, n);
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        d[i * n + j] = 0.5 * (s[i * n + j] + s[j * n + i]);
                    }
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::TriSolveLower(l, b) => {
                let tl = self.value(*l);
                let n = tl.shape()[0];
                let m = out.shape()[1];
                let mut bbar = gd.to_vec();
                solve_lower_transpose(tl.data(), n, &mut bbar, m);
                if self.ng(*l) {
                    let mut d = vec![0.0; n * n];
                    gemm(n, m, n, &bbar, false, out.data(), true, &mut d, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            d[i * n + j] = if j <= i { -d[i * n + j] } else { 0.0 };
                        }
                    }
                    self.acc(grads, *l, self.like(*l, d));
                }
                self.acc(grads, *b, self.like(*b, bbar));
            }
            Op::Matern52 { a, b, lengthscale, scale } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let ell = self.value(*lengthscale).item();
                let sf2 = self.value(*scale).item();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                let (mut gl, mut gs) = (0.0, 0.0);
                let coef = 5.0 / (3.0 * ell * ell);
                for i in 0..n {
                    let ra = ta.row(i);
                    for j in 0..m {
                        let gij = gd[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let rb = tb.row(j);
                        let r = dist(ra, rb);
                        let s = 5f64.sqrt() * r / ell;
                        let e = (-s).exp();
                        gs += gij * (1.0 + s + s * s / 3.0) * e;
                        gl += gij * sf2 * s * s * (1.0 + s) * e / (3.0 * ell);
                        let w = -gij * sf2 * (1.0 + s) * e * coef;
                        for c in 0..d {
                            let diff = ra[c] - rb[c];
                            ga[i * d + c] += w * diff;
                            gb[j * d + c] -= w * diff;
                        }
                    }
                }
                self.acc(grads, *a, self.like(*a, ga));
                self.acc(grads, *b, self.like(*b, gb));
                self.acc(grads, *lengthscale, self.like(*lengthscale, vec![gl]));
                self.acc(grads, *scale, self.like(*scale, vec![gs]));
            }
        }
    }
}

fn transpose_vec(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Matérn-5/2 covariance at distance `r`.
pub fn matern52_value(r: f64, lengthscale: f64, scale: f64) -> f64 {
    let s = 5f64.sqrt() * r / lengthscale;
    scale * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn lse_slice(x: &[f64]) -> f64 {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
pub fn softplus_value(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of [`softplus_value`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check_unary(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = build(&mut g, v);
            g.value(y).item()
        };
        let mut g = Graph::new();
        let v = g.param(&x0);
        let y = build(&mut g, v);
        let grads = g.backward(y).unwrap();
        let ad = grads.get(v).unwrap().data().to_vec();
        let fd = numeric_grad(&x0, &f);
        for (a, n) in ad.iter().zip(&fd) {
            assert!(close(*a, *n, 1e-6), "autodiff {a} vs finite difference {n}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_of_zeros_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.log_sum_exp_last(x);
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_only_yield_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn elementwise_gradients() {
        let x = sample(&[3, 4], 1);
        check_unary(x.clone(), |g, v| {
            let e = g.exp(v);
            let s = g.softplus(v);
            let q = g.mul(e, s).unwrap();
            g.sum(q)
        });
        check_unary(x.map(|v| v.abs() + 0.5), |g, v| {
            let l = g.log(v);
            let r = g.sqrt(v);
            let q = g.div(l, r).unwrap();
            g.mean(q)
        });
    }

    #[test]
    fn broadcast_gradients() {
        let row = sample(&[4], 2);
        let m = sample(&[3, 4], 3);
        check_unary(row.clone(), |g, v| {
            let c = g.constant(m.clone());
            let a = g.sub(c, v).unwrap();
            let b = g.div(a, v).unwrap();
            let s = g.square(b);
            g.sum(s)
        });
        check_unary(Tensor::scalar(0.7), |g, v| {
            let c = g.constant(m.clone());
            let a = g.mul(v, c).unwrap();
            let b = g.add(a, v).unwrap();
            let s = g.square(b);
            g.sum(s)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        let x = sample(&[3, 5], 4);
        let w = sample(&[3, 5], 5);
        check_unary(x.clone(), |g, v| {
            let c = g.constant(w.clone());
            let s = g.softmax_last(v);
            let p = g.mul(s, c).unwrap();
            g.sum(p)
        });
        check_unary(x.clone(), |g, v| {
            let c = g.constant(w.clone());
            let s = g.log_softmax_last(v);
            let p = g.mul(s, c).unwrap();
            g.sum(p)
        });
        check_unary(x, |g, v| {
            let l = g.log_sum_exp_last(v);
            let sq = g.square(l);
            g.sum(sq)
        });
    }

    #[test]
    fn structural_gradients() {
        let x = sample(&[3, 4], 6);
        let w = sample(&[4, 5], 7);
        check_unary(x.clone(), |g, v| {
            let t = g.transpose(v).unwrap();
            let a = g.slice_last(t, 1, 3).unwrap();
            let b = g.slice_last(t, 0, 1).unwrap();
            let c = g.concat_last(&[a, b]).unwrap();
            let r = g.reshape(c, &[12]).unwrap();
            let s = g.square(r);
            let sl = g.sum_last(s);
            g.scale(sl, 0.5)
        });
        check_unary(x.clone(), |g, v| {
            let c = g.constant(w.clone());
            let m = g.matmul(v, c).unwrap();
            let n = g.normalize_rows(m).unwrap();
            let s = g.sum_last(n);
            let q = g.square(s);
            let l2 = g.l2_norm(v);
            let tot = g.sum(q);
            g.add(tot, l2).unwrap()
        });
    }

    #[test]
    fn normalize_zero_row_has_no_gradient() {
        let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(&x);
        let n = g.normalize_rows(v).unwrap();
        assert_eq!(g.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        assert_eq!(&grads.get(v).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn cholesky_and_solve_gradients() {
        let raw = sample(&[4, 4], 8);
        let rhs = sample(&[4, 3], 9);
        // Symmetric positive-definite input built from the parameter.
        check_unary(raw, |g, v| {
            let vt = g.transpose(v).unwrap();
            let a = g.matmul(v, vt).unwrap();
            let eye = g.constant(Tensor::eye(4));
            let a = g.add(a, eye).unwrap();
            let l = g.cholesky(a).unwrap();
            let b = g.constant(rhs.clone());
            let x = g.tri_solve_lower(l, b).unwrap();
            let d = g.diag(l).unwrap();
            let ld = g.log(d);
            let s1 = g.sum(ld);
            let sq = g.square(x);
            let s2 = g.sum(sq);
            g.add(s1, s2).unwrap()
        });
        let lraw = sample(&[3, 3], 10);
        check_unary(lraw, |g, v| {
            let f = g.lower_factor(v).unwrap();
            let b = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.1]).unwrap());
            let x = g.tri_solve_lower(f, b).unwrap();
            let sq = g.square(x);
            g.sum(sq)
        });
    }

    #[test]
    fn matern_gradients() {
        let a = sample(&[3, 2], 11);
        let b = sample(&[4, 2], 12);
        let w = sample(&[3, 4], 13);
        check_unary(a.clone(), |g, v| {
            let bb = g.constant(b.clone());
            let ls = g.scalar(0.8);
            let sc = g.scalar(1.3);
            let k = g.matern52(v, bb, ls, sc).unwrap();
            let c = g.constant(w.clone());
            let p = g.mul(k, c).unwrap();
            g.sum(p)
        });
        check_unary(Tensor::vector(vec![0.8, 1.3]), |g, v| {
            let aa = g.constant(a.clone());
            let bb = g.constant(b.clone());
            let ls = g.slice_last(v, 0, 1).unwrap();
            let sc = g.slice_last(v, 1, 2).unwrap();
            let ls = g.reshape(ls, &[]).unwrap();
            let sc = g.reshape(sc, &[]).unwrap();
            let k = g.matern52(aa, bb, ls, sc).unwrap();
            let c = g.constant(w.clone());
            let p = g.mul(k, c).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn matern_reference_value() {
        let v = matern52_value(1.0, 1.0, 1.0);
        let s5 = 5f64.sqrt();
        let expect = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.5240).abs() < 5e-5);
        assert_eq!(matern52_value(0.0, 0.7, 2.5), 2.5);
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-4, 0.3, 1.0, 7.0, 50.0] {
            assert!((softplus_value(inverse_softplus(y)) - y).abs() < 1e-9 * (1.0 + y));
        }
    }
}
