// Raw forward/backward kernels on row-major slices. Shape checking happens in
// `graph.rs`; everything here assumes consistent dimensions.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one group of one image into `[cin_g * k * k, h_out * w_out]`.
fn im2col<T: Element>(g: &ConvGeom, img: &[T], group: usize, cols: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = g.h * g.w;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let src = &img[(group * g.cin_g() + c) * plane..][..plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            src[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], group: usize, img: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let plane = g.h * g.w;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let dst = &mut img[(group * g.cin_g() + c) * plane..][..plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            let d = &mut dst[iy as usize * g.w + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut out = vec![T::zero(); g.n * g.c_out * ho * wo];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
        return out;
    }
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * ho * wo;
    let kk = g.cin_g() * g.k * g.k;
    let wg = g.cout_g() * kk;
    let mut cols = vec![T::zero(); kk * ho * wo];
    for n in 0..g.n {
        let img = &x[n * in_img..][..in_img];
        let dst = &mut out[n * out_img..][..out_img];
        for grp in 0..g.groups {
            let rhs: &[T] = if g.is_pointwise() {
                &img[grp * kk * ho * wo..][..kk * ho * wo]
            } else {
                im2col(g, img, grp, &mut cols);
                &cols
            };
            T::gemm(
                g.cout_g(),
                kk,
                ho * wo,
                T::one(),
                &w[grp * wg..][..wg],
                kk as isize,
                1,
                rhs,
                (ho * wo) as isize,
                1,
                T::zero(),
                &mut dst[grp * g.cout_g() * ho * wo..][..g.cout_g() * ho * wo],
                (ho * wo) as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(dx, dw)`.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, &mut dx, &mut dw);
        return (dx, dw);
    }
    let (ho, wo) = (g.h_out(), g.w_out());
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * ho * wo;
    let kk = g.cin_g() * g.k * g.k;
    let wg = g.cout_g() * kk;
    let hw = ho * wo;
    let mut cols = vec![T::zero(); kk * hw];
    let mut dcols = vec![T::zero(); kk * hw];
    for n in 0..g.n {
        let img = &x[n * in_img..][..in_img];
        let dyn_ = &dy[n * out_img..][..out_img];
        for grp in 0..g.groups {
            let dy_g = &dyn_[grp * g.cout_g() * hw..][..g.cout_g() * hw];
            let w_g = &w[grp * wg..][..wg];
            // dW_g += dY_g * cols^T
            let cols_ref: &[T] = if g.is_pointwise() {
                &img[grp * kk * hw..][..kk * hw]
            } else {
                im2col(g, img, grp, &mut cols);
                &cols
            };
            T::gemm(
                g.cout_g(),
                hw,
                kk,
                T::one(),
                dy_g,
                hw as isize,
                1,
                cols_ref,
                1,
                hw as isize,
                T::one(),
                &mut dw[grp * wg..][..wg],
                kk as isize,
                1,
            );
            // dcols = W_g^T * dY_g
            if g.is_pointwise() {
                let dst = &mut dx[n * in_img + grp * kk * hw..][..kk * hw];
                T::gemm(
                    kk,
                    g.cout_g(),
                    hw,
                    T::one(),
                    w_g,
                    1,
                    kk as isize,
                    dy_g,
                    hw as isize,
                    1,
                    T::one(),
                    dst,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    g.cout_g(),
                    hw,
                    T::one(),
                    w_g,
                    1,
                    kk as isize,
                    dy_g,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(g, &dcols, grp, &mut dx[n * in_img..][..in_img]);
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for n in 0..g.n {
        for c in 0..g.c_in {
            let src = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            let ker = &w[c * g.k * g.k..][..g.k * g.k];
            let dst = &mut out[(n * g.c_out + c) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                acc = acc + ker[ky * g.k + kx] * src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for n in 0..g.n {
        for c in 0..g.c_in {
            let off = (n * g.c_in + c) * g.h * g.w;
            let src = &x[off..][..g.h * g.w];
            let ker = &w[c * g.k * g.k..][..g.k * g.k];
            let grad = &dy[(n * g.c_out + c) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = grad[oy * wo + ox];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                let idx = iy as usize * g.w + ix as usize;
                                let kw = &mut dw[c * g.k * g.k + ky * g.k + kx];
                                *kw = *kw + go * src[idx];
                                let d = &mut dx[off + idx];
                                *d = *d + go * ker[ky * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics over N, H, W: `(mean, biased variance)`.
pub(crate) fn channel_stats<T: Element>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s = s + x[(i * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            for &e in &x[(i * c + ch) * hw..][..hw] {
                v = v + (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Normalizes with the given statistics. Returns `(y, x_hat)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_apply<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let h = (x[j] - mean[ch]) * inv_std[ch];
                xhat[j] = h;
                y[j] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Backward of batch-statistics normalization. Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward_batch<T: Element>(
    dy: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sdy = sdy + dy[j];
                sdyx = sdyx + dy[j] * xhat[j];
            }
        }
        dgamma[ch] = sdyx;
        dbeta[ch] = sdy;
        let scale = gamma[ch] * inv_std[ch] / count;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dx[j] = scale * (count * dy[j] - sdy - xhat[j] * sdyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise log-softmax of `[n, k]` logits.
pub(crate) fn softmax_rows<T: Element>(logits: &[T], n: usize, k: usize) -> Vec<T> {
    let mut probs = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits[i * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in probs[i * k..][..k].iter_mut().zip(row) {
            *p = (l - max).exp();
            z = z + *p;
        }
        probs[i * k..][..k].iter_mut().for_each(|p| *p = *p / z);
    }
    probs
}
