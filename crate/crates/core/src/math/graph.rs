//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles while the
//! forward pass runs eagerly. [`Graph::backward`] replays the tape in reverse
//! and returns gradients for every parameter that took part in the pass.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MulScalar { x: Var, s: Var },
    Exp { x: Var },
    Gelu { x: Var, tanh: Vec<T> },
    Sigmoid { x: Var },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    CrossEntropy { logits: Var, probs: Vec<T>, target: Vec<T>, classes: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention(Box<AttentionSaved<T>>),
    GatherRows { x: Var, idx: Vec<Option<usize>>, width: usize },
    PoolRows { x: Var, groups: Vec<Vec<usize>>, width: usize },
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Mean { x: Var, outer: usize, n: usize, inner: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Reshape { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    BoxLoss { pred: Var, target: Vec<T> },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    lq: usize,
    lk: usize,
    probs: Vec<T>,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of one forward pass over a borrowed parameter store.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            ndim: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[inline]
/// Inner tanh of the GELU approximation.
fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    // 1 - 2 / (e^{2u} + 1) saturates cleanly at both ends
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

fn gelu_value<T: Real>(x: T, t: T) -> T {
    T::lit(0.5) * x * (T::one() + t)
}

fn gelu_deriv<T: Real>(x: T, t: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let du = c * (one + T::lit(3.0) * a * x * x);
    half * (one + t) + half * x * (one - t * t) * du
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Corner form of a `(cx, cy, w, h)` box, clamped to the unit square, with
/// the derivative mask of each corner with respect to its unclamped value.
#[inline]
fn corners<T: Real>(b: &[T]) -> ([T; 4], [bool; 4]) {
    let half = T::lit(0.5);
    let raw = [
        b[0] - half * b[2],
        b[1] - half * b[3],
        b[0] + half * b[2],
        b[1] + half * b[3],
    ];
    let mut out = [T::zero(); 4];
    let mut live = [true; 4];
    for i in 0..4 {
        if raw[i] < T::zero() {
            out[i] = T::zero();
            live[i] = false;
        } else if raw[i] > T::one() {
            out[i] = T::one();
            live[i] = false;
        } else {
            out[i] = raw[i];
        }
    }
    (out, live)
}

/// Box regression loss `(1 - GIoU) + L1` for one box, with its gradient with
/// respect to the predicted `(cx, cy, w, h)`.
pub(crate) fn box_loss_with_grad<T: Real>(pred: &[T], target: &[T]) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let (p, live) = corners(pred);
    let (t, _) = corners(target);
    let (px1, py1, px2, py2) = (p[0], p[1], p[2], p[3]);
    let (tx1, ty1, tx2, ty2) = (t[0], t[1], t[2], t[3]);

    let pw = px2 - px1;
    let ph = py2 - py1;
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);

    let ix1 = px1.max(tx1);
    let ix2 = px2.min(tx2);
    let iy1 = py1.max(ty1);
    let iy2 = py2.min(ty2);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let iou = inter / union;

    let ex1 = px1.min(tx1);
    let ex2 = px2.max(tx2);
    let ey1 = py1.min(ty1);
    let ey2 = py2.max(ty2);
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let enc = ew * eh;
    let giou = iou - (enc - union) / enc;

    let mut l1 = zero;
    let mut grad = [zero; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        l1 += d.abs();
        grad[i] = if d > zero {
            one
        } else if d < zero {
            -one
        } else {
            zero
        };
    }
    let loss = one - giou + l1;

    // d loss / d corner, via loss = 2 - iou - union/enc + l1
    let d_inter_d = {
        let iw_live = iw_raw > zero && ih_raw > zero;
        let mut g = [zero; 4]; // x1, y1, x2, y2
        if iw_live {
            if px1 > tx1 {
                g[0] = -ih;
            }
            if px2 < tx2 {
                g[2] = ih;
            }
            if py1 > ty1 {
                g[1] = -iw;
            }
            if py2 < ty2 {
                g[3] = iw;
            }
        }
        g
    };
    let d_area_p = [-ph, -pw, ph, pw];
    let d_enc = {
        let mut g = [zero; 4];
        if px1 < tx1 {
            g[0] = -eh;
        }
        if px2 > tx2 {
            g[2] = eh;
        }
        if py1 < ty1 {
            g[1] = -ew;
        }
        if py2 > ty2 {
            g[3] = ew;
        }
        g
    };
    let mut d_corner = [zero; 4];
    for c in 0..4 {
        let d_union = d_area_p[c] - d_inter_d[c];
        let d_iou = (d_inter_d[c] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enc - union * d_enc[c]) / (enc * enc);
        d_corner[c] = -d_iou - d_ratio;
    }
    for c in 0..4 {
        if !live[c] {
            d_corner[c] = zero;
        }
    }
    let half = T::lit(0.5);
    // x1 = cx - w/2, x2 = cx + w/2 (same for y)
    grad[0] += d_corner[0] + d_corner[2];
    grad[1] += d_corner[1] + d_corner[3];
    grad[2] += half * (d_corner[2] - d_corner[0]);
    grad[3] += half * (d_corner[3] - d_corner[1]);
    (loss, grad)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x[.., k] @ w[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Elementwise sum; `b` may be broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("add {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let w = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(w) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = sa.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, &[a, b]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, c }, &[x])
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("mul_scalar by {:?}", self.shape(s))));
        }
        let c = self.scalar(s);
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulScalar { x, s }, &[x, s]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let tanh: Vec<T> = t.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = t.data().iter().zip(&tanh).map(|(&v, &h)| gelu_value(v, h)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu { x, tanh }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Row-wise `H(target, softmax(logits))` over the last dimension.
    ///
    /// Returns one loss per row; shape is the logits shape without its last
    /// dimension (`[1]` for a vector).
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs target {:?}",
                t.shape(),
                target.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let classes = t.last_dim();
        let rows = t.rows();
        let mut probs = vec![T::zero(); t.len()];
        let mut losses = Vec::with_capacity(rows);
        for r in 0..rows {
            let z = &t.data()[r * classes..(r + 1) * classes];
            let y = &target.data()[r * classes..(r + 1) * classes];
            let mx = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum: T = z.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            let mut loss = T::zero();
            for c in 0..classes {
                probs[r * classes + c] = (z[c] - lse).exp();
                if y[c] != T::zero() {
                    loss -= y[c] * (z[c] - lse);
                }
            }
            losses.push(loss);
        }
        let mut shape = t.shape()[..t.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(
            Tensor::from_parts(shape, losses),
            Op::CrossEntropy {
                logits,
                probs,
                target: target.data().to_vec(),
                classes,
            },
            &[logits],
        ))
    }

    /// Normalizes each vector along the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias {:?}/{:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let src = t.data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.rows();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[B, Lq, D]`, `k`/`v` are `[B, Lk, D]`. `key_bias` is an additive
    /// `[B, Lk]` term (use `-inf` to mask a key); every query must keep at
    /// least one finite key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_bias: Option<&[T]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape(format!("attention q {sq:?} k {sk:?} v {sv:?}")));
        }
        let (batch, lq, dim) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads for width {dim}")));
        }
        if let Some(bias) = key_bias {
            if bias.len() != batch * lk {
                return Err(Error::Shape(format!(
                    "key bias has {} entries, need {}",
                    bias.len(),
                    batch * lk
                )));
            }
        }
        let dh = dim / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        let mut out = vec![T::zero(); batch * lq * dim];
        let mut scores = vec![T::zero(); lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let qi = &qd[(b * lq + i) * dim + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..lk {
                        let kj = &kd[(b * lk + j) * dim + h * dh..][..dh];
                        let mut s = T::zero();
                        for c in 0..dh {
                            s += qi[c] * kj[c];
                        }
                        s = s * scale;
                        if let Some(bias) = key_bias {
                            s += bias[b * lk + j];
                        }
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    if !mx.is_finite() {
                        return Err(Error::NonFinite("attention scores (all keys masked?)".into()));
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let o = &mut out[(b * lq + i) * dim + h * dh..][..dh];
                    for j in 0..lk {
                        let pj = scores[j] / sum;
                        p[j] = pj;
                        if pj != T::zero() {
                            let vj = &vd[(b * lk + j) * dim + h * dh..][..dh];
                            for c in 0..dh {
                                o[c] += pj * vj[c];
                            }
                        }
                    }
                }
            }
        }
        let shape = vec![batch, lq, dim];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                batch,
                lq,
                lk,
                probs,
            })),
            &[q, k, v],
        ))
    }

    /// Selects rows (first dimension) of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let width = t.len() / n;
        if idx.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let mut out = vec![T::zero(); idx.len() * width];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= n {
                    return Err(Error::Shape(format!("row {i} out of {n}")));
                }
                out[r * width..(r + 1) * width].copy_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
            &[x],
        ))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(x, &idx)
    }

    /// Mean of selected rows (first dimension) of `x`, one output row per group.
    pub fn pool_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        self.pool_rows_impl(x, groups, false)
    }

    /// Like [`Graph::pool_rows`], but each element is summed in ascending
    /// value order, so the result does not depend on the order of a group.
    pub fn pool_rows_canonical(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        self.pool_rows_impl(x, groups, true)
    }

    fn pool_rows_impl(&mut self, x: Var, groups: &[Vec<usize>], canonical: bool) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let width = t.len() / n;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Shape("pool_rows needs nonempty groups".into()));
        }
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row {bad} out of {n}")));
        }
        let mut out = vec![T::zero(); groups.len() * width];
        let mut column = Vec::new();
        for (gi, group) in groups.iter().enumerate() {
            let dst = &mut out[gi * width..(gi + 1) * width];
            if canonical {
                for (c, o) in dst.iter_mut().enumerate() {
                    column.clear();
                    column.extend(group.iter().map(|&i| t.data()[i * width + c]));
                    column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    *o = column.iter().copied().sum();
                }
            } else {
                for &i in group {
                    for (o, &s) in dst.iter_mut().zip(&t.data()[i * width..(i + 1) * width]) {
                        *o += s;
                    }
                }
            }
            let inv = T::one() / T::lit(group.len() as f64);
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = groups.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::PoolRows {
                x,
                groups: groups.to_vec(),
                width,
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Shape(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        ))
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let mut out = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mean { x, outer, n, inner }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Scales every vector along the last dimension to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let eps = T::lit(eps);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, &[x])
    }

    /// Per-box `(1 - GIoU) + L1` between predicted `[N, 4]` boxes and fixed targets.
    pub fn box_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != target.shape() || t.last_dim() != 4 {
            return Err(Error::Shape(format!(
                "box_loss pred {:?} target {:?}",
                t.shape(),
                target.shape()
            )));
        }
        let losses: Vec<T> = t
            .data()
            .chunks_exact(4)
            .zip(target.data().chunks_exact(4))
            .map(|(p, q)| box_loss_with_grad(p, q).0)
            .collect();
        let n = losses.len();
        Ok(self.push(
            Tensor::from_parts(vec![n], losses),
            Op::BoxLoss {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut per_param: Vec<Option<Vec<T>>> = vec![None; self.params.len()];

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &node.op, &g, &mut grads, &mut per_param);
        }
        let out = Gradients { per_param };
        if !out.all_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        idx: usize,
        op: &Op<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        per_param: &mut [Option<Vec<T>>],
    ) {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = per_param[id.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (s, &x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(a) {
                    let bv = self.value(*b).data();
                    acc(*a, &mut |s| T::gemm(m, n, k, g, false, bv, true, s, T::one()));
                }
                if needs(b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |s| T::gemm(k, m, n, av, true, g, false, s, T::one()));
                }
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s += x));
                acc(*b, &mut |s| {
                    let w = s.len();
                    for chunk in g.chunks_exact(w) {
                        s.iter_mut().zip(chunk).for_each(|(s, &x)| *s += x);
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s += x));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &x)| *s -= x));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &v)| *s += v * *c));
            }
            Op::MulScalar { x, s: sv } => {
                let c = self.scalar(*sv);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &v)| *s += v * c));
                if needs(sv) {
                    let xv = self.value(*x).data();
                    let d: T = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    acc(*sv, &mut |s| s[0] += d);
                }
            }
            Op::Exp { x } => {
                let y = self.value(Var(idx)).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_deriv(xv[i], tanh[i]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = self.value(Var(idx)).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.value(Var(idx)).data();
                let (outer, n, inner) = (*outer, *n, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                classes,
            } => {
                let c = *classes;
                acc(*logits, &mut |s| {
                    for (r, &gr) in g.iter().enumerate() {
                        let y = &target[r * c..(r + 1) * c];
                        let mass: T = y.iter().copied().sum();
                        for j in 0..c {
                            s[r * c + j] += gr * (mass * probs[r * c + j] - y[j]);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::lit(d as f64);
                acc(*x, &mut |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            s[r * d + c] += rs * (dxh - m1 - xh[c] * m2);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            s[c] += gr[c] * xh[c];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for gr in g.chunks_exact(d) {
                        for c in 0..d {
                            s[c] += gr[c];
                        }
                    }
                });
            }
            Op::Attention(saved) => self.backward_attention(saved, g, &mut acc),
            Op::GatherRows { x, idx, width } => {
                let w = *width;
                acc(*x, &mut |s| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for c in 0..w {
                                s[i * w + c] += g[r * w + c];
                            }
                        }
                    }
                });
            }
            Op::PoolRows { x, groups, width } => {
                let w = *width;
                acc(*x, &mut |s| {
                    for (gi, group) in groups.iter().enumerate() {
                        let inv = T::one() / T::lit(group.len() as f64);
                        for &i in group {
                            for c in 0..w {
                                s[i * w + c] += g[gi * w + c] * inv;
                            }
                        }
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |s| {
                        for o in 0..*outer {
                            for c in 0..w {
                                s[o * w + c] += g[o * row + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Mean { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let inv = T::one() / T::lit(n as f64);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanAll { x } => acc(*x, &mut |s| {
                let v = g[0] / T::lit(s.len() as f64);
                s.iter_mut().for_each(|s| *s += v);
            }),
            Op::Reshape { x } => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &v)| *s += v)),
            Op::L2Normalize { x, norms } => {
                let y = self.value(Var(idx)).data();
                let d = y.len() / norms.len();
                acc(*x, &mut |s| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            s[r * d + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                });
            }
            Op::BoxLoss { pred, target } => {
                let pv = self.value(*pred).data();
                acc(*pred, &mut |s| {
                    for (r, &gr) in g.iter().enumerate() {
                        let (_, d) = box_loss_with_grad(&pv[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]);
                        for c in 0..4 {
                            s[r * 4 + c] += gr * d[c];
                        }
                    }
                });
            }
        }
    }

    fn backward_attention(
        &self,
        saved: &AttentionSaved<T>,
        g: &[T],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [T])),
    ) {
        let AttentionSaved {
            q,
            k,
            v,
            heads,
            batch,
            lq,
            lk,
            probs,
        } = saved;
        let (heads, batch, lq, lk) = (*heads, *batch, *lq, *lk);
        let qd = self.value(*q).data();
        let kd = self.value(*k).data();
        let vd = self.value(*v).data();
        let dim = qd.len() / (batch * lq);
        let dh = dim / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut ds = vec![T::zero(); lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let p = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(b * lq + i) * dim + h * dh..][..dh];
                    let mut dot = T::zero();
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            ds[j] = T::zero();
                            continue;
                        }
                        let vj = &vd[(b * lk + j) * dim + h * dh..][..dh];
                        let mut dp = T::zero();
                        for c in 0..dh {
                            dp += go[c] * vj[c];
                        }
                        ds[j] = dp;
                        dot += dp * p[j];
                        let dvj = &mut dv[(b * lk + j) * dim + h * dh..][..dh];
                        for c in 0..dh {
                            dvj[c] += p[j] * go[c];
                        }
                    }
                    let qi = &qd[(b * lq + i) * dim + h * dh..][..dh];
                    let dqi_off = (b * lq + i) * dim + h * dh;
                    for j in 0..lk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let s = p[j] * (ds[j] - dot) * scale;
                        let koff = (b * lk + j) * dim + h * dh;
                        for c in 0..dh {
                            dq[dqi_off + c] += s * kd[koff + c];
                            dk[koff + c] += s * qi[c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
            acc(var, &mut |s| s.iter_mut().zip(&d).for_each(|(s, &x)| *s += x));
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::math::{grad_check, GradCheckOptions};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn store(shapes: &[&[usize]]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, sh) in shapes.iter().enumerate() {
            s.add(format!("vision.p{i}"), rand_tensor(sh, 100 + i as u64)).unwrap();
        }
        s
    }

    /// Weighted sum with fixed random weights so every output entry matters.
    fn probe(g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
        let w = g.constant(rand_tensor(g.shape(x), 7));
        let y = g.mul(x, w)?;
        Ok(g.sum_all(y))
    }

    fn p(g: &mut Graph<'_, f64>, i: usize) -> Var {
        g.param(ParamId(i))
    }

    fn check<F>(shapes: &[&[usize]], mut f: F)
    where
        F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
    {
        let mut s = store(shapes);
        let opts = GradCheckOptions {
            epsilon: 1e-4,
            max_coords: None,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&mut s, |g| {
            let y = f(g)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                probe(g, y)
            }
        }, &opts)
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.worst);
        assert!(r.coords_checked > 0);
    }

    #[test]
    fn grad_matmul_and_transpose() {
        check(&[&[2, 3, 4], &[4, 5]], |g| {
            let (a, b) = (p(g, 0), p(g, 1));
            g.matmul(a, b)
        });
        check(&[&[3, 4]], |g| {
            let a = p(g, 0);
            g.transpose(a)
        });
    }

    #[test]
    fn grad_elementwise() {
        check(&[&[2, 3], &[3]], |g| {
            let (a, b) = (p(g, 0), p(g, 1));
            g.add(a, b)
        });
        check(&[&[2, 3], &[2, 3]], |g| {
            let (a, b) = (p(g, 0), p(g, 1));
            let d = g.sub(a, b)?;
            g.mul(d, a)
        });
        check(&[&[2, 3], &[1]], |g| {
            let (a, s) = (p(g, 0), p(g, 1));
            let y = g.mul_scalar(a, s)?;
            Ok(g.scale(y, -1.5))
        });
    }

    #[test]
    fn grad_pointwise_nonlinearities() {
        check(&[&[3, 4]], |g| {
            let a = p(g, 0);
            Ok(g.exp(a))
        });
        check(&[&[3, 4]], |g| {
            let a = p(g, 0);
            let a = g.scale(a, 3.0);
            Ok(g.gelu(a))
        });
        check(&[&[3, 4]], |g| {
            let a = p(g, 0);
            let a = g.scale(a, 4.0);
            Ok(g.sigmoid(a))
        });
    }

    #[test]
    fn grad_softmax_every_axis() {
        for axis in 0..3 {
            check(&[&[2, 3, 4]], |g| {
                let a = p(g, 0);
                g.softmax(a, axis)
            });
        }
    }

    #[test]
    fn grad_cross_entropy_soft_targets() {
        let target = Tensor::from_f64(&[2, 3], &[0.2, 0.3, 0.5, 0.0, 1.0, 0.0]).unwrap();
        check(&[&[2, 3]], |g| {
            let a = p(g, 0);
            g.cross_entropy(a, &target)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check(&[&[3, 5], &[5], &[5]], |g| {
            let (x, gain, bias) = (p(g, 0), p(g, 1), p(g, 2));
            g.layer_norm(x, gain, bias, 1e-6)
        });
    }

    #[test]
    fn grad_attention_with_mask() {
        let bias = [0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY];
        check(&[&[2, 2, 4], &[2, 3, 4], &[2, 3, 4]], |g| {
            let (q, k, v) = (p(g, 0), p(g, 1), p(g, 2));
            g.attention(q, k, v, 2, Some(&bias))
        });
    }

    #[test]
    fn grad_row_ops() {
        check(&[&[4, 3]], |g| {
            let x = p(g, 0);
            g.gather_rows(x, &[Some(2), None, Some(2), Some(0)])
        });
        check(&[&[4, 3]], |g| {
            let x = p(g, 0);
            g.pool_rows(x, &[vec![0, 1, 3], vec![2]])
        });
        check(&[&[4, 3]], |g| {
            let x = p(g, 0);
            g.pool_rows_canonical(x, &[vec![3, 1], vec![2, 0, 1]])
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[&[2, 3], &[2, 2]], |g| {
            let (a, b) = (p(g, 0), p(g, 1));
            g.concat(&[a, b, a], 1)
        });
        check(&[&[2, 3], &[1, 3]], |g| {
            let (a, b) = (p(g, 0), p(g, 1));
            g.concat(&[a, b], 0)
        });
        for axis in 0..3 {
            check(&[&[2, 3, 2]], |g| {
                let a = p(g, 0);
                g.mean(a, axis)
            });
        }
        check(&[&[2, 3]], |g| {
            let a = p(g, 0);
            let a = g.reshape(a, &[3, 2])?;
            let e = g.exp(a);
            Ok(g.mean_all(e))
        });
        check(&[&[3, 4]], |g| {
            let a = p(g, 0);
            Ok(g.l2_normalize(a, 1e-12))
        });
    }

    #[test]
    fn grad_box_loss() {
        let target = Tensor::from_f64(&[2, 4], &[0.3, 0.4, 0.2, 0.3, 0.7, 0.6, 0.4, 0.2]).unwrap();
        check(&[&[2, 4]], |g| {
            let x = p(g, 0);
            let b = g.sigmoid(x);
            let l = g.box_loss(b, &target)?;
            Ok(g.sum_all(l))
        });
    }

    #[test]
    fn softmax_examples() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[4], &[1.0; 4]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, f64::NAN]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        assert!(matches!(g.softmax(x, 1), Err(Error::InvalidAxis { axis: 1, ndim: 1 })));
    }

    #[test]
    fn cross_entropy_examples() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let onehot = Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        let l = g.cross_entropy(x, &onehot).unwrap();
        assert!((g.scalar(l) + 0.75f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 0.2877).abs() < 1e-4);
        let v = 7;
        let mut t = vec![0.0; v];
        t[3] = 1.0;
        let target = Tensor::from_f64(&[v], &t).unwrap();
        let x = g.constant(Tensor::from_f64(&[v], &[0.5; 7]).unwrap());
        let l = g.cross_entropy(x, &target).unwrap();
        assert!((g.scalar(l) - (v as f64).ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; v];
        peaked[3] = 50.0;
        let x = g.constant(Tensor::from_f64(&[v], &peaked).unwrap());
        let l = g.cross_entropy(x, &target).unwrap();
        assert!(g.scalar(l) < 1e-20);
        let x = g.constant(Tensor::from_f64(&[3], &[0.0; 3]).unwrap());
        assert!(matches!(g.cross_entropy(x, &target), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let ones = g.constant(Tensor::from_f64(&[4], &[1.0; 4]).unwrap());
        let zeros = g.constant(Tensor::from_f64(&[4], &[0.0; 4]).unwrap());
        let x = g.constant(Tensor::from_f64(&[4], &[2.5; 4]).unwrap());
        let y = g.layer_norm(x, ones, zeros, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
        let bias = g.constant(Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = g.constant(rand_tensor(&[3, 4], 1));
        let y = g.layer_norm(x, zeros, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0].repeat(3)[..]);
        let x = g.constant(rand_tensor(&[5, 64], 2));
        let (gain, bias) = (g_ones(&mut g, 64), g_zeros(&mut g, 64));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in g.value(y).data().chunks(64) {
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    fn g_ones(g: &mut Graph<'_, f64>, d: usize) -> Var {
        g.constant(Tensor::from_f64(&[d], &vec![1.0; d]).unwrap())
    }

    fn g_zeros(g: &mut Graph<'_, f64>, d: usize) -> Var {
        g.constant(Tensor::from_f64(&[d], &vec![0.0; d]).unwrap())
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let q = g.constant(rand_tensor(&[1, 2, 4], 3));
        let k = g.constant(rand_tensor(&[1, 3, 4], 4));
        let mut vt = rand_tensor(&[1, 3, 4], 5);
        let v = g.constant(vt.clone());
        let bias = [0.0, 0.0, f64::NEG_INFINITY];
        let a = g.attention(q, k, v, 2, Some(&bias)).unwrap();
        vt.data_mut()[8..].iter_mut().for_each(|x| *x = 1e6);
        let v2 = g.constant(vt);
        let b = g.attention(q, k, v2, 2, Some(&bias)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn embedding_lookup_scatters_gradient() {
        let s = store(&[&[3, 2]]);
        let mut g = Graph::new(&s);
        let table = p(&mut g, 0);
        let rows = g.select_rows(table, &[1, 1, 2]).unwrap();
        let l = g.sum_all(rows);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_needs_a_scalar_root() {
        let s = store(&[&[2, 2]]);
        let mut g = Graph::new(&s);
        let a = p(&mut g, 0);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn unused_parameters_get_no_gradient() {
        let s = store(&[&[2], &[2]]);
        let mut g = Graph::new(&s);
        let a = p(&mut g, 0);
        let l = g.sum_all(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(ParamId(1)).is_none());
    }
}
