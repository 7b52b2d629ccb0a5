use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{lit, Element, Tensor};

use super::{Op, Tape, Var, MIN_SQUARED_DISTANCE};

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient at `v`, or `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient at `v`; zeros when `v` did not participate.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn contains(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}

fn acc<T: Element>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Element> Tape<T> {
    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.nodes.get(loss.0).ok_or(Error::UnknownVar(loss.0))?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let flip = self.fault.is_some() && node.op.kind() == self.fault;
            let mut local: Vec<(Var, Vec<T>)> = Vec::with_capacity(4);
            self.local_grads(id, &gout, &mut local);
            for (v, mut g) in local {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if flip {
                    g.iter_mut().for_each(|x| *x = -*x);
                }
                let slot = acc(&mut grads[v.0], g.len());
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.nodes[v.0].value.len()]
    }

    fn local_grads(&self, id: usize, gout: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.iter().map(|&g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, gout.iter().zip(bv).map(|(&g, &q)| g * q).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, gout.iter().zip(av).map(|(&g, &p)| g * p).collect()));
                }
            }
            Op::Scale(x, c) | Op::Affine(x, c) => {
                out.push((*x, gout.iter().map(|&g| g * *c).collect()));
            }
            Op::Relu(x) => {
                out.push((
                    *x,
                    gout.iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Sigmoid(x) => {
                out.push((
                    *x,
                    gout.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                ));
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.needs(*x).then(|| self.zeros_like(*x));
                let mut dw = self.needs(*w).then(|| self.zeros_like(*w));
                kernels::conv2d_backward(geom, xv, wv, gout, dx.as_deref_mut(), dw.as_deref_mut());
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*w, g)));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (n, c, plane) = self.channel_layout("batch_norm", *x).expect("recorded shape");
                let g = self.value(*gamma).data();
                let m = lit::<T>((n * plane) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] += gout[j] * xhat[j];
                            dbeta[ch] += gout[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gout.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            // dxhat = g * gamma; sums of dxhat and dxhat*xhat are
                            // gamma * dbeta and gamma * dgamma.
                            let k = g[ch] * inv_std[ch] / m;
                            for j in base..base + plane {
                                dx[j] = k * (m * gout[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, plane) = self.channel_layout("batch_norm", *x).expect("recorded shape");
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gout.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] += gout[j] * xhat[j];
                            dbeta[ch] += gout[j];
                            dx[j] = gout[j] * g[ch] * inv_std[ch];
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::ChannelWeightedSum { a, wa, b, wb } => {
                let nc = self.value(*wa).len();
                let plane = self.value(*a).len() / nc;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (wav, wbv) = (self.value(*wa).data(), self.value(*wb).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); av.len()];
                let mut dwa = vec![T::zero(); nc];
                let mut dwb = vec![T::zero(); nc];
                for k in 0..nc {
                    for j in k * plane..(k + 1) * plane {
                        da[j] = gout[j] * wav[k];
                        db[j] = gout[j] * wbv[k];
                        dwa[k] += gout[j] * av[j];
                        dwb[k] += gout[j] * bv[j];
                    }
                }
                out.push((*a, da));
                out.push((*wa, dwa));
                out.push((*b, db));
                out.push((*wb, dwb));
            }
            Op::GlobalAvgPool(x) => {
                let len = self.value(*x).len();
                let nc = gout.len();
                let plane = len / nc;
                let inv = lit::<T>(1.0 / plane as f64);
                let mut dx = vec![T::zero(); len];
                for k in 0..nc {
                    let g = gout[k] * inv;
                    dx[k * plane..(k + 1) * plane].iter_mut().for_each(|v| *v = g);
                }
                out.push((*x, dx));
            }
            Op::StripeAvgPool { x, rows } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let nc = gout.len();
                let inv = lit::<T>(1.0 / ((rows.1 - rows.0) * w) as f64);
                let mut dx = self.zeros_like(*x);
                for k in 0..nc {
                    let g = gout[k] * inv;
                    let base = k * h * w;
                    dx[base + rows.0 * w..base + rows.1 * w]
                        .iter_mut()
                        .for_each(|v| *v = g);
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    for i in 0..n {
                        let dxr = &mut dx[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let g = gout[i * dout + o];
                            for (d, &q) in dxr.iter_mut().zip(&wv[o * din..(o + 1) * din]) {
                                *d += g * q;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    for i in 0..n {
                        let xr = &xv[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let g = gout[i * dout + o];
                            for (d, &p) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += g * p;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for i in 0..n {
                        for o in 0..dout {
                            db[o] += gout[i * dout + o];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax(x) => {
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum::<T>();
                    for ((dv, &p), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = p * (g - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = self.zeros_like(*x);
                for (&g, &i) in gout.iter().zip(argmax) {
                    dx[i] += g;
                }
                out.push((*x, dx));
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let dims = if s.len() == 3 { [1, s[0], s[1], s[2]] } else { [s[0], s[1], s[2], s[3]] };
                let mut dx = self.zeros_like(*x);
                kernels::avg_pool2s2_backward(dims, gout, &mut dx);
                out.push((*x, dx));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let n = sa[0];
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = &gout[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::ScaleByEntry { x, v, entry } => {
                let vv = self.value(*v).data();
                if self.needs(*x) {
                    out.push((*x, gout.iter().map(|&g| g * vv[*entry]).collect()));
                }
                if self.needs(*v) {
                    let xv = self.value(*x).data();
                    let mut dv = vec![T::zero(); vv.len()];
                    dv[*entry] = gout.iter().zip(xv).map(|(&g, &p)| g * p).sum::<T>();
                    out.push((*v, dv));
                }
            }
            Op::Sum(x) => {
                out.push((*x, vec![gout[0]; self.value(*x).len()]));
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                out.push((*x, vec![gout[0] / lit::<T>(len as f64); len]));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = gout[0] / lit::<T>(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= scale;
                }
                out.push((*logits, dx));
            }
            Op::Triplet { x, active } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let xv = self.value(*x).data();
                let scale = gout[0] / lit::<T>(n as f64);
                let floor = lit::<T>(MIN_SQUARED_DISTANCE).sqrt();
                let mut dx = vec![T::zero(); n * d];
                // d(dist_ij)/dx_i = (x_i - x_j) / dist_ij, zero where the floor is active.
                let mut push_pair = |i: usize, j: usize, dist: T, coef: T| {
                    if dist <= floor {
                        return;
                    }
                    for k in 0..d {
                        let diff = (xv[i * d + k] - xv[j * d + k]) / dist * coef;
                        dx[i * d + k] += diff;
                        dx[j * d + k] -= diff;
                    }
                };
                for &(a, p, q, dp, dn) in active {
                    push_pair(a, p, dp, scale);
                    push_pair(a, q, dn, -scale);
                }
                out.push((*x, dx));
            }
        }
    }
}
