//! Direct-loop compute kernels over NCHW buffers.
//!
//! Shape rules:
//! - convolution: `out = (in + 2*pad - k) / stride + 1` per spatial axis
//! - 3x3 max pooling, stride 2, pad 1: `out = (in - 1) / 2 + 1`
//! - 2x2 average pooling, stride 2: `out = in / 2`

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel_h * self.kernel_w
    }

    /// Multiply-adds for one forward pass over the whole batch.
    pub fn macs(&self) -> usize {
        self.batch * self.out_h() * self.out_w() * self.weight_len()
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let p = self.padding as isize;
        let k = k as isize;
        // need 0 <= o*s + k - p <= input - 1
        let lo = (p - k + s - 1).div_euclid(s).max(0);
        let hi = (input as isize - 1 + p - k).div_euclid(s).min(output as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let (kh_n, kw_n) = (g.kernel_h, g.kernel_w);
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh_n * ow_n;
    out.iter_mut().for_each(|v| *v = T::zero());
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let grp = oc / cout_g;
            let o_base = (n * g.out_channels + oc) * out_plane;
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let x_base = (n * g.in_channels + ic) * in_plane;
                for ki in 0..kh_n {
                    let (oh_lo, oh_hi) = g.valid(ki, g.in_h, oh_n);
                    for kj in 0..kw_n {
                        let wv = w[((oc * cin_g + icg) * kh_n + ki) * kw_n + kj];
                        let (ow_lo, ow_hi) = g.valid(kj, g.in_w, ow_n);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let orow = &mut out[o_base + oh * ow_n..o_base + (oh + 1) * ow_n];
                            let xrow = &x[x_base + ih * g.in_w..x_base + (ih + 1) * g.in_w];
                            if g.stride == 1 {
                                let off = kj as isize - g.padding as isize;
                                let xs = &xrow[(ow_lo as isize + off) as usize
                                    ..(ow_hi as isize + off) as usize];
                                for (o, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kj - g.padding;
                                    orow[ow] += wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of a convolution.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let (kh_n, kw_n) = (g.kernel_h, g.kernel_w);
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh_n * ow_n;
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let grp = oc / cout_g;
            let o_base = (n * g.out_channels + oc) * out_plane;
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let x_base = (n * g.in_channels + ic) * in_plane;
                for ki in 0..kh_n {
                    let (oh_lo, oh_hi) = g.valid(ki, g.in_h, oh_n);
                    for kj in 0..kw_n {
                        let widx = ((oc * cin_g + icg) * kh_n + ki) * kw_n + kj;
                        let wv = w[widx];
                        let (ow_lo, ow_hi) = g.valid(kj, g.in_w, ow_n);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let drow = &dout[o_base + oh * ow_n..o_base + (oh + 1) * ow_n];
                            let xr = x_base + ih * g.in_w;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kj - g.padding;
                                let d = drow[ow];
                                acc += d * x[xr + iw];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xr + iw] += wv * d;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 max pooling, stride 2, padding 1. Returns argmax input offsets.
pub fn max_pool3s2_forward<T: Element>(
    dims: [usize; 4],
    x: &[T],
    out: &mut [T],
) -> Vec<usize> {
    let [n, c, h, w] = dims;
    let (oh_n, ow_n) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut arg = vec![0usize; n * c * oh_n * ow_n];
    for plane in 0..n * c {
        let xb = plane * h * w;
        let ob = plane * oh_n * ow_n;
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ki in 0..3 {
                    let ih = (oh * 2 + ki) as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let iw = (ow * 2 + kj) as isize - 1;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = xb + ih as usize * w + iw as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out[ob + oh * ow_n + ow] = best;
                arg[ob + oh * ow_n + ow] = best_i;
            }
        }
    }
    arg
}

/// 2x2 average pooling, stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2s2_forward<T: Element>(dims: [usize; 4], x: &[T], out: &mut [T]) {
    let [n, c, h, w] = dims;
    let (oh_n, ow_n) = (h / 2, w / 2);
    let quarter = super::lit::<T>(0.25);
    for plane in 0..n * c {
        let xb = plane * h * w;
        let ob = plane * oh_n * ow_n;
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let i = xb + 2 * oh * w + 2 * ow;
                out[ob + oh * ow_n + ow] = (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter;
            }
        }
    }
}

pub fn avg_pool2s2_backward<T: Element>(dims: [usize; 4], dout: &[T], dx: &mut [T]) {
    let [n, c, h, w] = dims;
    let (oh_n, ow_n) = (h / 2, w / 2);
    let quarter = super::lit::<T>(0.25);
    for plane in 0..n * c {
        let xb = plane * h * w;
        let ob = plane * oh_n * ow_n;
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let d = dout[ob + oh * ow_n + ow] * quarter;
                let i = xb + 2 * oh * w + 2 * ow;
                dx[i] += d;
                dx[i + 1] += d;
                dx[i + w] += d;
                dx[i + w + 1] += d;
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn channel_moments<T: Element>(n: usize, c: usize, plane: usize, x: &[T]) -> (Vec<T>, Vec<T>) {
    let count = super::lit::<T>((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += x[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            v += x[base..base + plane].iter().map(|&xv| (xv - m) * (xv - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
