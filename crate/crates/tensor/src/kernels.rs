//! Dense loops behind the graph primitives. Shapes are validated by the
//! caller; these functions only index.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k_h) / self.s_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k_w) / self.s_w + 1
    }
}

/// Direct cross-correlation, no padding.
pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.out_c * oh * ow];
    for o in 0..g.out_c {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.in_c {
            for p in 0..g.k_h {
                for q in 0..g.k_w {
                    let wv = w[((o * g.in_c + c) * g.k_h + p) * g.k_w + q];
                    for i in 0..oh {
                        let row = (c * g.in_h + i * g.s_h + p) * g.in_w + q;
                        let out_row = &mut plane[i * ow..(i + 1) * ow];
                        for (j, dst) in out_row.iter_mut().enumerate() {
                            *dst = *dst + wv * x[row + j * g.s_w];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeom, w: &[T], gout: &[T], gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for o in 0..g.out_c {
        let plane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_c {
            for p in 0..g.k_h {
                for q in 0..g.k_w {
                    let wv = w[((o * g.in_c + c) * g.k_h + p) * g.k_w + q];
                    for i in 0..oh {
                        let row = (c * g.in_h + i * g.s_h + p) * g.in_w + q;
                        for j in 0..ow {
                            let idx = row + j * g.s_w;
                            gx[idx] = gx[idx] + wv * plane[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T], gw: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for o in 0..g.out_c {
        let plane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_c {
            for p in 0..g.k_h {
                for q in 0..g.k_w {
                    let mut acc = T::zero();
                    for i in 0..oh {
                        let row = (c * g.in_h + i * g.s_h + p) * g.in_w + q;
                        for j in 0..ow {
                            acc = acc + x[row + j * g.s_w] * plane[i * ow + j];
                        }
                    }
                    let idx = ((o * g.in_c + c) * g.k_h + p) * g.k_w + q;
                    gw[idx] = gw[idx] + acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(g: &ConvGeom, gout: &[T], gb: &mut [T]) {
    let plane = g.out_h() * g.out_w();
    for o in 0..g.out_c {
        let s: T = gout[o * plane..(o + 1) * plane].iter().copied().sum();
        gb[o] = gb[o] + s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k_h) / self.s_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k_w) / self.s_w + 1
    }
}

pub(crate) fn avg_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_usize(g.k_h * g.k_w).unwrap();
    let mut out = Vec::with_capacity(g.c * oh * ow);
    for c in 0..g.c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for p in 0..g.k_h {
                    let row = (c * g.in_h + i * g.s_h + p) * g.in_w + j * g.s_w;
                    for q in 0..g.k_w {
                        acc = acc + x[row + q];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &PoolGeom, gout: &[T], gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_usize(g.k_h * g.k_w).unwrap();
    for c in 0..g.c {
        for i in 0..oh {
            for j in 0..ow {
                let share = gout[(c * oh + i) * ow + j] * inv;
                for p in 0..g.k_h {
                    let row = (c * g.in_h + i * g.s_h + p) * g.in_w + j * g.s_w;
                    for q in 0..g.k_w {
                        gx[row + q] = gx[row + q] + share;
                    }
                }
            }
        }
    }
}

/// `a` is `[m, k]`, `b` is `[k, n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let src = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d = *d + av * bv;
            }
        }
    }
    out
}

/// Accumulates `g · bᵀ` into `ga` (`[m, k]`).
pub(crate) fn matmul_grad_lhs<T: Scalar>(
    gout: &[T],
    b: &[T],
    ga: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + gout[i * n + j] * b[p * n + j];
            }
            ga[i * k + p] = ga[i * k + p] + acc;
        }
    }
}

/// Accumulates `aᵀ · g` into `gb` (`[k, n]`).
pub(crate) fn matmul_grad_rhs<T: Scalar>(
    a: &[T],
    gout: &[T],
    gb: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                gb[p * n + j] = gb[p * n + j] + av * gout[i * n + j];
            }
        }
    }
}
