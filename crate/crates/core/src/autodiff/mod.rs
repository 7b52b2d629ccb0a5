//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. An op is recorded
//! with a backward rule only when at least one input requires a gradient;
//! otherwise its output is a constant. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid topological order because
//! inputs always precede their consumers.
//!
//! Layouts: feature maps are `(N, C, H, W)`; rank-3 `(C, H, W)` inputs are
//! accepted by the spatial ops and treated as a batch of one. Feature
//! vectors are `(N, D)`.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{lit, Element, Tensor};

mod backward;
pub mod gradcheck;

pub use backward::Gradients;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op families, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Affine,
    Relu,
    Sigmoid,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    ChannelWeightedSum,
    GlobalAvgPool,
    StripeAvgPool,
    Linear,
    Softmax,
    MaxPool,
    AvgPool,
    Concat,
    ScaleByEntry,
    Sum,
    Mean,
    CrossEntropy,
    Triplet,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Affine,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Conv2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::ChannelWeightedSum,
        OpKind::GlobalAvgPool,
        OpKind::StripeAvgPool,
        OpKind::Linear,
        OpKind::Softmax,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::Concat,
        OpKind::ScaleByEntry,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::CrossEntropy,
        OpKind::Triplet,
    ];

    /// Snake-case name, e.g. `batch_norm_train`.
    pub fn name(self) -> String {
        let mut out = String::new();
        for (i, c) in format!("{self:?}").chars().enumerate() {
            if c.is_ascii_uppercase() && i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        }
        out
    }

    /// Inverse of [`OpKind::name`]; case, `_` and `-` are ignored.
    pub fn from_name(name: &str) -> Option<OpKind> {
        let key = |s: &str| s.to_ascii_lowercase().replace(['_', '-'], "");
        Self::ALL.into_iter().find(|k| key(&k.name()) == key(name))
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelWeightedSum {
        a: Var,
        wa: Var,
        b: Var,
        wb: Var,
    },
    GlobalAvgPool(Var),
    StripeAvgPool {
        x: Var,
        rows: (usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Concat(Var, Var),
    ScaleByEntry {
        x: Var,
        v: Var,
        entry: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Triplet {
        x: Var,
        /// (anchor, positive, negative, d_ap, d_an) for anchors with positive hinge.
        active: Vec<(usize, usize, usize, T, T)>,
    },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Affine(..) => OpKind::Affine,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::ChannelWeightedSum { .. } => OpKind::ChannelWeightedSum,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::StripeAvgPool { .. } => OpKind::StripeAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::Concat(..) => OpKind::Concat,
            Op::ScaleByEntry { .. } => OpKind::ScaleByEntry,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Triplet { .. } => OpKind::Triplet,
        })
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(N, C, H, W)` view of a rank-3 or rank-4 shape.
fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w] => Ok([1, c, h, w]),
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects (C,H,W) or (N,C,H,W)"),
        }),
    }
}

fn with_spatial(template: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if template.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negates every input gradient produced by ops of `kind`. Only meant
    /// for mutation fixtures that check the gradient suite catches errors.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Batch statistics of a train-mode batch-norm output.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats<T>> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNormTrain {
                batch_mean,
                batch_var,
                ..
            } => Some(BatchStats {
                mean: batch_mean.clone(),
                var: batch_var.clone(),
            }),
            _ => None,
        }
    }

    /// Multiply-adds performed by the convolutions and dense maps recorded
    /// so far.
    pub fn multiply_adds(&self) -> usize {
        self.nodes
            .iter()
            .map(|node| match &node.op {
                Op::Conv2d { geom, .. } => geom.macs(),
                Op::Linear { w, .. } => node.value.shape()[0] * self.nodes[w.0].value.len(),
                _ => 0,
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant outputs keep their op so train-mode batch statistics stay
        // readable; backward never visits them.
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    /// A copy of `x` that carries no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::Scale(x, c), &[x]))
    }

    /// `a * x + b` elementwise with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| a * v + b);
        Ok(self.push(out, Op::Affine(x, a), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    /// Grouped 2-D convolution without bias. `w` is `(Cout, Cin/groups, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.check(&[x, w])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, c, h, wd] = nchw("conv2d", &xs)?;
        if ws.len() != 4 || groups == 0 || stride == 0 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c % groups != 0 || cout % groups != 0 || cin_g * groups != c {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: cout,
            groups,
            in_h: h,
            in_w: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let out = Tensor::new(with_spatial(&xs, n, cout, oh, ow), out)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// 1x1 convolution; `w` is `(Cout, Cin, 1, 1)`.
    pub fn pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv2d(x, w, 1, 0, 1)
    }

    /// 3x3 depthwise convolution, padding 1; `w` is `(C, 1, 3, 3)`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = nchw("depthwise3x3", self.shape(x))?[1];
        let ws = self.shape(w);
        if ws != [c, 1, 3, 3] {
            return Err(mismatch("depthwise3x3", &self.shape(x).to_vec(), &ws.to_vec()));
        }
        self.conv2d(x, w, 1, 1, c)
    }

    fn channel_layout(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match *s {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects (N,C) or (N,C,H,W)"),
            }),
        }
    }

    fn check_affine_params(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch(op, &[c], self.shape(p)));
            }
        }
        Ok(())
    }

    /// Batch normalization with batch statistics (biased variance).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let (n, c, plane) = self.channel_layout("batch_norm", x)?;
        self.check_affine_params("batch_norm", c, gamma, beta)?;
        let xv = self.value(x).data();
        let (mean, var) = kernels::channel_moments(n, c, plane, xv);
        let eps = lit::<T>(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let count = n * plane;
        let correction = if count > 1 {
            lit::<T>(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        let batch_var = var.iter().map(|&v| v * correction).collect();
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let (n, c, plane) = self.channel_layout("batch_norm", x)?;
        self.check_affine_params("batch_norm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch("batch_norm", &[c], &[running_mean.len()]));
        }
        let eps = lit::<T>(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    xhat[j] = (xv[j] - running_mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// `wa[n,c] * a[n,c,..] + wb[n,c] * b[n,c,..]`, weights broadcast over space.
    pub fn channel_weighted_sum(&mut self, a: Var, wa: Var, b: Var, wb: Var) -> Result<Var> {
        self.check(&[a, wa, b, wb])?;
        let sa = self.shape(a).to_vec();
        if self.shape(b) != sa.as_slice() {
            return Err(mismatch("channel_weighted_sum", &sa, self.shape(b)));
        }
        let [n, c, h, w] = nchw("channel_weighted_sum", &sa)?;
        for wv in [wa, wb] {
            if self.shape(wv) != [n, c] {
                return Err(mismatch("channel_weighted_sum", &sa, self.shape(wv)));
            }
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (wav, wbv) = (self.value(wa).data(), self.value(wb).data());
        let mut out = vec![T::zero(); av.len()];
        for nc in 0..n * c {
            let (p, q) = (wav[nc], wbv[nc]);
            for j in nc * plane..(nc + 1) * plane {
                out[j] = p * av[j] + q * bv[j];
            }
        }
        let out = Tensor::new(sa, out)?;
        Ok(self.push(out, Op::ChannelWeightedSum { a, wa, b, wb }, &[a, wa, b, wb]))
    }

    /// `(N,C,H,W) -> (N,C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let [n, c, h, w] = nchw("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let inv = lit::<T>(1.0 / plane as f64);
        let xv = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|nc| xv[nc * plane..(nc + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Average over rows `[start, end)` and all columns: `(N,C,H,W) -> (N,C)`.
    pub fn stripe_avg_pool(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(&[x])?;
        let [n, c, h, w] = nchw("stripe_avg_pool", self.shape(x))?;
        if start >= end || end > h {
            return Err(Error::InvalidArgument(format!(
                "stripe_avg_pool: rows {start}..{end} outside height {h}"
            )));
        }
        let inv = lit::<T>(1.0 / ((end - start) * w) as f64);
        let xv = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|nc| {
                let base = nc * h * w;
                xv[base + start * w..base + end * w].iter().copied().sum::<T>() * inv
            })
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            out,
            Op::StripeAvgPool {
                x,
                rows: (start, end),
            },
            &[x],
        ))
    }

    /// `x (N,In) · wᵀ (In,Out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(&[x, w])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            self.check(&[b])?;
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", &ws, self.shape(b)));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * dout];
        for i in 0..n {
            let xr = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                let mut s = xr.iter().zip(wr).map(|(&p, &q)| p * q).sum::<T>();
                if let Some(bv) = bv {
                    s += bv[o];
                }
                out[i * dout + o] = s;
            }
        }
        let out = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Softmax along the last dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool3s2(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        let dims = nchw("max_pool3s2", &xs)?;
        let [n, c, h, w] = dims;
        let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let argmax = kernels::max_pool3s2_forward(dims, self.value(x).data(), &mut out);
        let out = Tensor::new(with_spatial(&xs, n, c, oh, ow), out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2s2(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        let dims = nchw("avg_pool2s2", &xs)?;
        let [n, c, h, w] = dims;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                shape: xs,
                reason: "avg_pool2s2 needs spatial size at least 2x2".into(),
            });
        }
        let mut out = vec![T::zero(); n * c * (h / 2) * (w / 2)];
        kernels::avg_pool2s2_forward(dims, self.value(x).data(), &mut out);
        let out = Tensor::new(with_spatial(&xs, n, c, h / 2, w / 2), out)?;
        Ok(self.push(out, Op::AvgPool(x), &[x]))
    }

    /// Concatenation along the channel axis (dim 1) of `(N,C,...)` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat", &sa, &sb));
        }
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// `x * v[entry]`, where `v` is a vector variable.
    pub fn scale_by_entry(&mut self, x: Var, v: Var, entry: usize) -> Result<Var> {
        self.check(&[x, v])?;
        let vv = self.value(v);
        if entry >= vv.len() {
            return Err(Error::InvalidArgument(format!(
                "scale_by_entry: entry {entry} out of {}",
                vv.len()
            )));
        }
        let s = vv.data()[entry];
        let out = self.value(x).map(|e| e * s);
        Ok(self.push(out, Op::ScaleByEntry { x, v, entry }, &[x, v]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / lit::<T>(t.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Mean softmax cross-entropy of `(N,C)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", &s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss = loss / lit::<T>(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch-hard triplet loss on `(N,D)` features with Euclidean distance.
    ///
    /// Per anchor: hardest (largest-distance) positive and hardest
    /// (smallest-distance) negative, hinge `max(0, d_ap - d_an + margin)`,
    /// averaged over anchors. Ties resolve to the lowest index.
    pub fn triplet_batch_hard(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        self.check(&[x])?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("triplet", &s, &[labels.len()]));
        }
        let n = s[0];
        let dist = pairwise_distances(self.value(x));
        let margin = lit::<T>(margin);
        let mut active = Vec::new();
        let mut loss = T::zero();
        for a in 0..n {
            let mut pos: Option<(usize, T)> = None;
            let mut neg: Option<(usize, T)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.map_or(true, |(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.map_or(true, |(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
                return Err(Error::InvalidArgument(format!(
                    "triplet: anchor {a} lacks a positive or a negative in the batch"
                )));
            };
            let hinge = dp - dn + margin;
            if hinge > T::zero() {
                loss += hinge;
                active.push((a, p, q, dp, dn));
            }
        }
        loss = loss / lit::<T>(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Triplet { x, active }, &[x]))
    }
}

/// Smallest squared distance treated as nonzero by the triplet loss.
pub(crate) const MIN_SQUARED_DISTANCE: f64 = 1e-12;

/// Euclidean distances between all rows of an `(N,D)` tensor.
pub fn pairwise_distances<T: Element>(x: &Tensor<T>) -> Vec<T> {
    let (n, d) = (x.shape()[0], x.len() / x.shape()[0]);
    let xv = x.data();
    let floor = lit::<T>(MIN_SQUARED_DISTANCE);
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sq = xv[i * d..(i + 1) * d]
                .iter()
                .zip(&xv[j * d..(j + 1) * d])
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum::<T>();
            let v = sq.max(floor).sqrt();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

#[cfg(test)]
mod tests;
