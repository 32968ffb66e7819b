use super::kernels::{self, PAD};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Conv {
        x: Var,
        kernel: Vec<T>,
        k: usize,
    },
    LocalMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Im2col {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Kl {
        mu: Var,
        logvar: Var,
    },
}

impl<T> Op<T> {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(a, _) | Op::Exp(a) | Op::Relu(a) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Slice { x, .. }
            | Op::Conv { x, .. }
            | Op::LocalMax { x, .. }
            | Op::Im2col { x, .. } => vec![*x],
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::Kl { mu, logvar } => vec![*mu, *logvar],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every operand precedes its
/// consumer. [`Tape::backward`] walks the record once in reverse. Gradients of
/// intermediate nodes are released as soon as they have been propagated; leaf
/// gradients stay readable through [`Tape::grad`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank3(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(op, s, &[0, 0, 0])),
    }
}

fn leading(shape: &[usize]) -> &[usize] {
    &shape[..shape.len() - 1]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let operands = op.operands();
        if cfg!(debug_assertions) {
            let inputs_finite = operands.iter().all(|v| self.value(*v).is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "non-finite output from finite inputs (node {})",
                self.nodes.len()
            );
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`]; `None` when
    /// no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Like [`Tape::grad`] but yields zeros for unreached leaves.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.numel()])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Affine map over the last axis: `x[…×K] · w[K×N] + b[N]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let k = *xs.last().unwrap();
        let n = match ws {
            [k2, n] if *k2 == k => *n,
            _ => return Err(Error::dim("affine", xs, ws)),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [n] {
                return Err(Error::dim("affine bias", ws, self.value(b).shape()));
            }
        }
        let m = self.value(x).numel() / k;
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(bias);
                }
                out
            }
            None => vec![T::zero(); m * n],
        };
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let mut shape = leading(xs).to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = leading(self.value(*first).shape()).to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if leading(s) != lead.as_slice() {
                return Err(Error::dim("concat_channels", self.value(*first).shape(), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &cw) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * cw..(r + 1) * cw]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let c = *s.last().unwrap();
        if start >= end || end > c {
            return Err(Error::dim("slice_channels", s, &[start, end]));
        }
        let rows = self.value(x).numel() / c;
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let mut shape = leading(s).to_vec();
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, start, end }))
    }

    /// Depthwise cross-correlation of an `H×W×C` field with a fixed odd
    /// `k×k` kernel, zero padded to keep `H×W`.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: &Tensor<T>) -> Result<Var> {
        let dims = rank3("conv2d_depthwise", self.value(x))?;
        let k = match *kernel.shape() {
            [a, b] if a == b => a,
            ref s => return Err(Error::dim("conv2d_depthwise kernel", s, s)),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution kernel size {k} must be odd"
            )));
        }
        let out = kernels::conv_depthwise(self.value(x).data(), dims, kernel.data(), k);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                kernel: kernel.data().to_vec(),
                k,
            },
        ))
    }

    /// Per-channel maximum over an odd `w×w` window, zero padded.
    pub fn local_max(&mut self, x: Var, window: usize) -> Result<Var> {
        let dims = rank3("local_max", self.value(x))?;
        if window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "local max window {window} must be odd"
            )));
        }
        let (out, argmax) = kernels::local_max(self.value(x).data(), dims, window);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LocalMax { x, argmax }))
    }

    /// Patch extraction for strided convolution: `H×W×C` to `Ho×Wo×(k·k·C)`.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, c) = rank3("im2col", self.value(x))?;
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("im2col", self.value(x).shape(), &[k, k]));
        }
        let (ho, wo) = kernels::im2col_shape(h, w, k, stride, pad);
        let out = kernels::im2col(self.value(x).data(), (h, w, c), k, stride, pad);
        let value = Tensor::new([ho, wo, k * k * c], out)?;
        Ok(self.push(value, Op::Im2col { x, k, stride, pad }))
    }

    /// Mean squared error; `target` must not require a gradient.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.requires_grad(target) {
            return Err(Error::Usage("mse target must not require grad".into()));
        }
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim("mse_loss", p.shape(), t.shape()));
        }
        let n = T::from_usize(p.numel()).unwrap();
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }))
    }

    /// `KL(N(mu, exp(logvar)) ‖ N(0, I)) = −½ Σ (1 + logvar − mu² − exp(logvar))`.
    pub fn kl_divergence(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(logvar));
        if m.shape() != l.shape() {
            return Err(Error::dim("kl_divergence", m.shape(), l.shape()));
        }
        let half = T::from_f64_lossy(0.5);
        let s: T = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(&mu, &lv)| T::one() + lv - mu * mu - lv.exp())
            .sum();
        Ok(self.push(Tensor::scalar(-half * s), Op::Kl { mu, logvar }))
    }

    /// Propagates d(loss)/d(·) to every reachable node that requires a
    /// gradient. Leaf gradients accumulate across repeated uses and calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &mut self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            for (v, contribution) in self.contributions(i, g) {
                self.accumulate(v, contribution);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let slot = &mut self.nodes[v.0].grad;
        match slot {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Vector-Jacobian products of node `i` for each operand requiring grad.
    fn contributions(&self, i: usize, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, false, val(*b), true, &mut da, false);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), true, &g, false, &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::Affine { x, w, b } => {
                let (k, n) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                let m = self.value(*x).numel() / k;
                if wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, false, val(*w), true, &mut dx, false);
                    out.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*x), true, &g, false, &mut dw, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    out.push((b, db));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) && wants(*b) {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                } else if wants(*a) {
                    out.push((*a, g));
                } else if wants(*b) {
                    out.push((*b, g));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    out.push((*a, g.iter().map(|&g| g * *s).collect()));
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    out.push((*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect()));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    out.push((*a, d));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    out.push((*a, g));
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let cw = self.value(*p).last_dim();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(rows * cw);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + cw]);
                        }
                        out.push((*p, d));
                    }
                    offset += cw;
                }
            }
            Op::Slice { x, start, end } => {
                if wants(*x) {
                    let c = self.value(*x).last_dim();
                    let width = end - start;
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for (r, row) in g.chunks_exact(width).enumerate() {
                        d[r * c + start..r * c + end].copy_from_slice(row);
                    }
                    out.push((*x, d));
                }
            }
            Op::Conv { x, kernel, k } => {
                if wants(*x) {
                    let dims = rank3("conv", self.value(*x)).expect("checked in forward");
                    out.push((*x, kernels::conv_depthwise_backward(&g, dims, kernel, *k)));
                }
            }
            Op::LocalMax { x, argmax } => {
                if wants(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        if idx != PAD {
                            d[idx as usize] += gv;
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Im2col { x, k, stride, pad } => {
                if wants(*x) {
                    let dims = rank3("im2col", self.value(*x)).expect("checked in forward");
                    out.push((*x, kernels::im2col_backward(&g, dims, *k, *stride, *pad)));
                }
            }
            Op::Mse { pred, target } => {
                if wants(*pred) {
                    let (p, t) = (val(*pred), val(*target));
                    let coef = g[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                    out.push((
                        *pred,
                        p.iter().zip(t).map(|(&a, &b)| coef * (a - b)).collect(),
                    ));
                }
            }
            Op::Kl { mu, logvar } => {
                if wants(*mu) {
                    out.push((*mu, val(*mu).iter().map(|&m| g[0] * m).collect()));
                }
                if wants(*logvar) {
                    let half = T::from_f64_lossy(0.5);
                    let d = val(*logvar)
                        .iter()
                        .map(|&lv| g[0] * half * (lv.exp() - T::one()))
                        .collect();
                    out.push((*logvar, d));
                }
            }
        }
        out
    }
}
