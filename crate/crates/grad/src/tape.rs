//! Operation tape and reverse sweep.
//!
//! Every op evaluates eagerly and appends a node holding its output value, so
//! node indices are already in topological order. Shape errors inside op
//! composition are programming errors and panic; the failure modes callers can
//! trigger with data (an all-masked attention row, a non-scalar loss) come
//! back as [`GradError`].

use std::rc::Rc;

use crate::array::Array;
use crate::error::{GradError, Result};
use crate::kernels::{self, gemm, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GaussianNll {
        mu: Var,
        log_sigma: Var,
        target: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros of length `len` when unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn same_shape(a: &Array, b: &Array, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

fn leading(shape: &[usize], tail: usize) -> usize {
    shape[..shape.len() - tail].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf node; `requires_grad` marks it as a trainable input.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_broadcast: {sb:?} is not a suffix of {sa:?}"
        );
        let inner = vb.len();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Array::from_vec(sa, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddBroadcast(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Array::from_vec(va.shape(), va.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant array (dropout masks, weights).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const: length mismatch");
        let data = va.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let value = Array::from_vec(va.shape(), data);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, Rc::new(c)), rg)
    }

    /// `x[.., k] · w[k, m] -> [.., m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul: weight must be 2-d");
        let (k, m) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.last_dim(), k, "matmul: inner dimensions differ");
        let rows = vx.len() / k;
        let mut out = vec![0.0; rows * m];
        gemm(
            rows,
            k,
            m,
            vx.data(),
            false,
            vw.data(),
            false,
            &mut out,
            false,
        );
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = Array::from_vec(&shape, out);
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MatMul(x, w), rg)
    }

    /// Batched product over matching leading axes:
    /// `a[.., n, k] · b[.., k, m]`, or `a · bᵀ` with `b[.., m, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() >= 3 && sa.len() == sb.len(), "bmm: rank mismatch");
        assert_eq!(
            sa[..sa.len() - 2],
            sb[..sb.len() - 2],
            "bmm: batch axes differ"
        );
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let m = if trans_b {
            assert_eq!(sb[sb.len() - 1], k, "bmm: inner dimensions differ");
            sb[sb.len() - 2]
        } else {
            assert_eq!(sb[sb.len() - 2], k, "bmm: inner dimensions differ");
            sb[sb.len() - 1]
        };
        let groups = leading(sa, 2);
        let mut out = vec![0.0; groups * n * m];
        for g in 0..groups {
            gemm(
                n,
                k,
                m,
                &va.data()[g * n * k..(g + 1) * n * k],
                false,
                &vb.data()[g * k * m..(g + 1) * k * m],
                trans_b,
                &mut out[g * n * m..(g + 1) * n * m],
                false,
            );
        }
        let mut shape = sa.to_vec();
        let r = shape.len();
        shape[r - 1] = m;
        let value = Array::from_vec(&shape, out);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let value = Array::from_vec(va.shape(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.last_dim();
        assert!(d >= 2, "layer_norm needs at least two features");
        assert!(
            vg.len() == d && vb.len() == d,
            "layer_norm: gain/bias length"
        );
        let rows = vx.len() / d;
        let mut out = vec![0.0; vx.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (m, s) = kernels::layer_norm_row(
                &vx.data()[r * d..(r + 1) * d],
                vg.data(),
                vb.data(),
                &mut out[r * d..(r + 1) * d],
            );
            mean.push(m);
            rstd.push(s);
        }
        let value = Array::from_vec(vx.shape(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis restricted to `mask` (same length as `x`).
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        assert_eq!(vx.len(), mask.len(), "masked_softmax: mask length");
        let d = vx.last_dim();
        let mut out = vec![0.0; vx.len()];
        for (r, ((lrow, mrow), orow)) in vx
            .data()
            .chunks(d)
            .zip(mask.chunks(d))
            .zip(out.chunks_mut(d))
            .enumerate()
        {
            kernels::masked_softmax_into(lrow, mrow, orow, r)?;
        }
        let value = Array::from_vec(vx.shape(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        let (out_shape, data) = permute_data(vx.shape(), vx.data(), perm);
        let value = Array::from_vec(&out_shape, data);
        let rg = self.rg(x);
        self.push(value, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[..s.len() - 1], lead, "concat_last: leading axes differ");
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Array::from_vec(&shape, out);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatLast(parts.to_vec()), rg)
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; output is `[indices.len(), last_dim]`.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.len() / d;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            out.extend_from_slice(&vx.data()[i * d..(i + 1) * d]);
        }
        let value = Array::from_vec(&[indices.len(), d], out);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, Rc::new(indices)), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let data: Vec<f64> = vx.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = vx.shape()[..vx.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Array::from_vec(&shape, data);
        let rg = self.rg(x);
        self.push(value, Op::SumLast(x), rg)
    }

    /// Weighted mean of per-row Gaussian NLLs.
    ///
    /// `mu` and `log_sigma` are viewed as `[rows, d]`; each row contributes
    /// the NLL averaged over its `d` entries, weighted by `weights[row]`, and
    /// the result is divided by the weight total (0 when every weight is 0).
    pub fn gaussian_nll(
        &mut self,
        mu: Var,
        log_sigma: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    ) -> Var {
        let (vm, vs) = (self.value(mu), self.value(log_sigma));
        same_shape(vm, vs, "gaussian_nll");
        assert_eq!(vm.len(), target.len(), "gaussian_nll: target length");
        let d = vm.last_dim();
        let rows = vm.len() / d;
        assert_eq!(weights.len(), rows, "gaussian_nll: weight length");
        let wsum: f64 = weights.iter().sum();
        let mut total = 0.0;
        if wsum > 0.0 {
            for r in 0..rows {
                if weights[r] == 0.0 {
                    continue;
                }
                let mut row = 0.0;
                for i in r * d..(r + 1) * d {
                    row += kernels::nll_term(target[i], vm.data()[i], vs.data()[i]);
                }
                total += weights[r] * row / d as f64;
            }
            total /= wsum;
        }
        let rg = self.rg(mu) || self.rg(log_sigma);
        self.push(
            Array::scalar(total),
            Op::GaussianNll {
                mu,
                log_sigma,
                target: Rc::new(target),
                weights: Rc::new(weights),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(GradError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    let inner = d.len();
                    for chunk in g.chunks(inner) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c[i];
                    }
                });
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, m) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / k;
                self.acc(grads, *x, |d| {
                    gemm(rows, m, k, g, false, vw.data(), true, d, true)
                });
                self.acc(grads, *w, |d| {
                    gemm(k, rows, m, vx.data(), true, g, false, d, true)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let m = node.value.last_dim();
                let groups = leading(sa, 2);
                self.acc(grads, *a, |d| {
                    for gi in 0..groups {
                        let gc = &g[gi * n * m..(gi + 1) * n * m];
                        let bb = &vb.data()[gi * k * m..(gi + 1) * k * m];
                        // dA = dC · Bᵀ (B stored k×m) or dC · B (B stored m×k)
                        gemm(
                            n,
                            m,
                            k,
                            gc,
                            false,
                            bb,
                            !*trans_b,
                            &mut d[gi * n * k..(gi + 1) * n * k],
                            true,
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for gi in 0..groups {
                        let gc = &g[gi * n * m..(gi + 1) * n * m];
                        let aa = &va.data()[gi * n * k..(gi + 1) * n * k];
                        let db = &mut d[gi * k * m..(gi + 1) * k * m];
                        if *trans_b {
                            gemm(m, n, k, gc, true, aa, false, db, true);
                        } else {
                            gemm(k, n, m, aa, true, gc, false, db, true);
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kernels::gelu_grad(va[i]);
                    }
                })
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sign(va[i]);
                    }
                })
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[i] * va[i];
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*x).data();
                let vg = self.value(*gain).data();
                let d = vg.len();
                let rows = vx.len() / d;
                let xhat = |r: usize, i: usize| (vx[r * d + i] - mean[r]) * rstd[r];
                self.acc(grads, *gain, |dg| {
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += g[r * d + i] * xhat(r, i);
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for chunk in g.chunks(d) {
                        add_into(db, chunk);
                    }
                });
                self.acc(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            dxhat[i] = g[r * d + i] * vg[i];
                            m1 += dxhat[i];
                            m2 += dxhat[i] * xhat(r, i);
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for i in 0..d {
                            dx[r * d + i] += rstd[r] * (dxhat[i] - m1 - xhat(r, i) * m2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |dx| {
                    for ((drow, yrow), grow) in dx.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for i in 0..d {
                            drow[i] += yrow[i] * (grow[i] - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(node.value.shape(), g, &inverse);
                self.acc(grads, *x, |d| add_into(d, &back));
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(x, idx) => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |dx| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                self.acc(grads, *x, |dx| {
                    for (chunk, &gv) in dx.chunks_mut(d).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::GaussianNll {
                mu,
                log_sigma,
                target,
                weights,
            } => {
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return;
                }
                let (vm, vs) = (self.value(*mu).data(), self.value(*log_sigma).data());
                let d = self.value(*mu).last_dim();
                let coef = |r: usize| g[0] * weights[r] / (wsum * d as f64);
                self.acc(grads, *mu, |dm| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = coef(r);
                        for i in r * d..(r + 1) * d {
                            let ls = kernels::clamp_log_sigma(vs[i]);
                            dm[i] += c * -(target[i] - vm[i]) * (-2.0 * ls).exp();
                        }
                    }
                });
                self.acc(grads, *log_sigma, |ds| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = coef(r);
                        for i in r * d..(r + 1) * d {
                            if vs[i] < LOG_SIGMA_MIN || vs[i] > LOG_SIGMA_MAX {
                                continue;
                            }
                            let z = (target[i] - vm[i]) * (-vs[i]).exp();
                            ds[i] += c * (1.0 - z * z);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permute: rank mismatch");
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
