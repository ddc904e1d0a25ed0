use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Numeric mode: `F32` rounds every op result to the nearest f32 representable
/// (the training dtype); `F64` keeps full precision for oracle verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

// Some variants carry shape arguments that only the forward evaluation
// needs; they stay in the op so a node is self-describing in Debug output.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    Recip(VarId),
    Exp(VarId),
    Ln(VarId),
    Tanh(VarId),
    Sqrt(VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    SumAll(VarId),
    RowSum(VarId),
    ColSum(VarId),
    BroadcastCols(VarId, usize),
    BroadcastRows(VarId, usize),
    GatherRows(VarId, Rc<Vec<usize>>),
    ScatterRows(VarId, Rc<Vec<usize>>, usize),
    GatherElems(VarId, Rc<Vec<(usize, usize)>>),
    ScatterElems(VarId, Rc<Vec<(usize, usize)>>, (usize, usize)),
    SliceCols(VarId, usize, usize),
    PadCols(VarId, usize, usize),
    ConcatCols(Vec<VarId>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation tape. Every op evaluates eagerly and records enough structure to
/// build gradient expressions as new tape nodes, so `grad` composes with
/// itself (double backward) for Hessian-vector products.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, mut value: Tensor, requires_grad: bool) -> VarId {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable leaf (data, masks, detached values).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v, self.rg(a))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, self.rg(a))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v, self.rg(a))
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v, self.rg(a))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, self.rg(a))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v, self.rg(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, self.rg(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v, self.rg(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v, self.rg(a) || self.rg(b)))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, self.rg(a))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), self.rg(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// (m,n) -> (m,1)
    pub fn row_sum(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = t.data()[i * n..(i + 1) * n].iter().sum();
        }
        let v = Tensor::new(vec![m, 1], out).unwrap();
        self.push(Op::RowSum(a), v, self.rg(a))
    }

    /// (m,n) -> (1,n)
    pub fn col_sum(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![1, n], out).unwrap();
        self.push(Op::ColSum(a), v, self.rg(a))
    }

    /// (m,1) -> (m,n)
    pub fn broadcast_cols(&mut self, a: VarId, n: usize) -> VarId {
        let t = self.value(a);
        debug_assert_eq!(t.cols(), 1);
        let m = t.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let x = t.data()[i];
            for j in 0..n {
                out[i * n + j] = x;
            }
        }
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::BroadcastCols(a, n), v, self.rg(a))
    }

    /// (1,n) -> (m,n)
    pub fn broadcast_rows(&mut self, a: VarId, m: usize) -> VarId {
        let t = self.value(a);
        debug_assert_eq!(t.rows(), 1);
        let n = t.cols();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::BroadcastRows(a, m), v, self.rg(a))
    }

    /// Select rows of a (v,d) matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let t = self.value(a);
        let d = t.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![idx.len(), d], out).unwrap();
        self.push(Op::GatherRows(a, idx), v, self.rg(a))
    }

    /// Sum-scatter rows of a (k,d) matrix into an (m,d) zero matrix.
    pub fn scatter_rows(&mut self, a: VarId, idx: Rc<Vec<usize>>, m: usize) -> VarId {
        let t = self.value(a);
        let d = t.cols();
        debug_assert_eq!(t.rows(), idx.len());
        let mut out = vec![0.0; m * d];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                out[i * d + j] += t.data()[r * d + j];
            }
        }
        let v = Tensor::new(vec![m, d], out).unwrap();
        self.push(Op::ScatterRows(a, idx, m), v, self.rg(a))
    }

    /// Pick individual (row, col) entries of a (m,n) matrix -> (k,1).
    pub fn gather_elems(&mut self, a: VarId, idx: Rc<Vec<(usize, usize)>>) -> VarId {
        let t = self.value(a);
        let n = t.cols();
        let out: Vec<f64> = idx.iter().map(|&(r, c)| t.data()[r * n + c]).collect();
        let v = Tensor::new(vec![idx.len(), 1], out).unwrap();
        self.push(Op::GatherElems(a, idx), v, self.rg(a))
    }

    /// Sum-scatter a (k,1) column into an (m,n) zero matrix at given entries.
    pub fn scatter_elems(
        &mut self,
        a: VarId,
        idx: Rc<Vec<(usize, usize)>>,
        shape: (usize, usize),
    ) -> VarId {
        let t = self.value(a);
        let (m, n) = shape;
        let mut out = vec![0.0; m * n];
        for (k, &(r, c)) in idx.iter().enumerate() {
            out[r * n + c] += t.data()[k];
        }
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::ScatterElems(a, idx, shape), v, self.rg(a))
    }

    /// Columns [start, start+width) of a (m,n) matrix.
    pub fn slice_cols(&mut self, a: VarId, start: usize, width: usize) -> VarId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        debug_assert!(start + width <= n);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + width]);
        }
        let v = Tensor::new(vec![m, width], out).unwrap();
        self.push(Op::SliceCols(a, start, width), v, self.rg(a))
    }

    /// Place a (m,w) matrix into columns [start, start+w) of an (m,n) zero matrix.
    pub fn pad_cols(&mut self, a: VarId, start: usize, n: usize) -> VarId {
        let t = self.value(a);
        let (m, w) = (t.rows(), t.cols());
        debug_assert!(start + w <= n);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n + start..i * n + start + w]
                .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::PadCols(a, start, n), v, self.rg(a))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let m = self.value(parts[0]).rows();
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for i in 0..m {
                out[i * n + off..i * n + off + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    // ---- composites -------------------------------------------------------

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    /// Row-wise softmax with a detached max shift (gradient-exact for any
    /// constant shift).
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let shifted = self.sub_row_max(a);
        let e = self.exp(shifted);
        let s = self.row_sum(e);
        let r = self.recip(s);
        let n = self.value(a).cols();
        let rb = self.broadcast_cols(r, n);
        self.mul(e, rb)
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let shifted = self.sub_row_max(a);
        let e = self.exp(shifted);
        let s = self.row_sum(e);
        let ls = self.ln(s);
        let n = self.value(a).cols();
        let lsb = self.broadcast_cols(ls, n);
        self.sub(shifted, lsb)
    }

    fn sub_row_max(&mut self, a: VarId) -> VarId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut maxes = vec![f64::NEG_INFINITY; m];
        for i in 0..m {
            for j in 0..n {
                maxes[i] = maxes[i].max(t.data()[i * n + j]);
            }
        }
        let c = self.constant(Tensor::new(vec![m, 1], maxes).unwrap());
        let cb = self.broadcast_cols(c, n);
        self.sub(a, cb).unwrap()
    }

    /// Row-wise layer norm with affine scale/shift; variance floored at eps.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (m, n) = {
            let t = self.value(x);
            (t.rows(), t.cols())
        };
        let s = self.row_sum(x);
        let mu = self.scale(s, 1.0 / n as f64);
        let mub = self.broadcast_cols(mu, n);
        let xc = self.sub(x, mub)?;
        let sq = self.mul(xc, xc)?;
        let vs = self.row_sum(sq);
        let var = self.scale(vs, 1.0 / n as f64);
        let vare = self.add_scalar(var, eps);
        let sd = self.sqrt(vare);
        let inv = self.recip(sd);
        let invb = self.broadcast_cols(inv, n);
        let xn = self.mul(xc, invb)?;
        let gb = self.broadcast_rows(gamma, m);
        let scaled = self.mul(xn, gb)?;
        let bb = self.broadcast_rows(beta, m);
        self.add(scaled, bb)
    }

    /// tanh-approximation GELU, built from differentiable primitives.
    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x3 = {
            let x2 = self.mul(x, x)?;
            self.mul(x2, x)?
        };
        let x3s = self.scale(x3, 0.044715);
        let inner = self.add(x, x3s)?;
        let innerc = self.scale(inner, C);
        let t = self.tanh(innerc);
        let t1 = self.add_scalar(t, 1.0);
        let xh = self.scale(x, 0.5);
        self.mul(xh, t1)
    }

    /// x (m,n) + bias (1,n) broadcast over rows.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let m = self.value(x).rows();
        let bb = self.broadcast_rows(bias, m);
        self.add(x, bb)
    }

    // ---- reverse mode ------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to `wrt`. Gradient
    /// expressions are appended to the tape, so they can themselves be
    /// differentiated (see [`Tape::hvp_from`]). Variables not on the path to
    /// the loss get zero gradients.
    pub fn grad(&mut self, loss: VarId, wrt: &[VarId]) -> Result<Vec<VarId>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "grad needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let horizon = loss.0 + 1;
        let mut adj: Vec<Option<VarId>> = vec![None; horizon];
        let seed = self.constant(Tensor::scalar(1.0));
        adj[loss.0] = Some(seed);

        for i in (0..horizon).rev() {
            let g = match adj[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = VarId(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut adj, a, g)?;
                    self.accum(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, a, g)?;
                    if self.rg(b) {
                        let gb = self.neg(g);
                        self.accum(&mut adj, b, gb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b)?;
                        self.accum(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a)?;
                        self.accum(&mut adj, b, gb)?;
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::AddScalar(a, _) => {
                    self.accum(&mut adj, a, g)?;
                }
                Op::Recip(a) => {
                    // d(1/x) = -out^2
                    let o2 = self.mul(out, out)?;
                    let go = self.mul(g, o2)?;
                    let ga = self.neg(go);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out)?;
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r)?;
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Tanh(a) => {
                    // 1 - out^2
                    let o2 = self.mul(out, out)?;
                    let no2 = self.neg(o2);
                    let d = self.add_scalar(no2, 1.0);
                    let ga = self.mul(g, d)?;
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Sqrt(a) => {
                    let r = self.recip(out);
                    let gr = self.mul(g, r)?;
                    let ga = self.scale(gr, 0.5);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::Matmul(a, b) => {
                    if self.rg(a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt)?;
                        self.accum(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g)?;
                        self.accum(&mut adj, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::SumAll(a) => {
                    let (m, n) = {
                        let t = self.value(a);
                        (t.rows(), t.cols())
                    };
                    let gr = self.broadcast_cols(g, n);
                    let ga = self.broadcast_rows_from(gr, m)?;
                    self.accum(&mut adj, a, ga)?;
                }
                Op::RowSum(a) => {
                    let n = self.value(a).cols();
                    let ga = self.broadcast_cols(g, n);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::ColSum(a) => {
                    let m = self.value(a).rows();
                    let ga = self.broadcast_rows(g, m);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::BroadcastCols(a, _) => {
                    let ga = self.row_sum(g);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::BroadcastRows(a, _) => {
                    let ga = self.col_sum(g);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::GatherRows(a, idx) => {
                    let m = self.value(a).rows();
                    let ga = self.scatter_rows(g, idx, m);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::ScatterRows(a, idx, _) => {
                    let ga = self.gather_rows(g, idx);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::GatherElems(a, idx) => {
                    let t = self.value(a);
                    let shape = (t.rows(), t.cols());
                    let ga = self.scatter_elems(g, idx, shape);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::ScatterElems(a, idx, _) => {
                    let ga = self.gather_elems(g, idx);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::SliceCols(a, start, _) => {
                    let n = self.value(a).cols();
                    let ga = self.pad_cols(g, start, n);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::PadCols(a, start, _) => {
                    let w = self.value(a).cols();
                    let ga = self.slice_cols(g, start, w);
                    self.accum(&mut adj, a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let gp = self.slice_cols(g, off, w);
                            self.accum(&mut adj, p, gp)?;
                        }
                        off += w;
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Tensor::zeros(self.value(w).shape().to_vec());
                    out.push(self.constant(z));
                }
            }
        }
        Ok(out)
    }

    fn broadcast_rows_from(&mut self, a: VarId, m: usize) -> Result<VarId> {
        Ok(self.broadcast_rows(a, m))
    }

    fn accum(&mut self, adj: &mut [Option<VarId>], v: VarId, g: VarId) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        adj[v.0] = Some(match adj[v.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Hessian-vector product via double backward: Hv = d/dθ (gᵀv) with the
    /// probe v held constant.
    pub fn hvp_from(&mut self, loss: VarId, params: &[VarId], v: &[Tensor]) -> Result<Vec<VarId>> {
        if v.len() != params.len() {
            return Err(Error::shape(format!(
                "hvp probe has {} blocks, params have {}",
                v.len(),
                params.len()
            )));
        }
        for (p, vi) in params.iter().zip(v) {
            if self.value(*p).shape() != vi.shape() {
                return Err(Error::shape(format!(
                    "hvp probe block {:?} vs param {:?}",
                    vi.shape(),
                    self.value(*p).shape()
                )));
            }
        }
        let grads = self.grad(loss, params)?;
        let mut s: Option<VarId> = None;
        for (g, vi) in grads.iter().zip(v) {
            let vc = self.constant(vi.clone());
            let d = self.dot(*g, vc)?;
            s = Some(match s {
                Some(acc) => self.add(acc, d)?,
                None => d,
            });
        }
        let s = s.ok_or_else(|| Error::shape("empty parameter set".to_string()))?;
        self.grad(s, params)
    }
}
