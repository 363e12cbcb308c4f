//! Slice-level loops behind the matmul and convolution primitives.
//!
//! Work is partitioned over independent output rows/channels, so results do
//! not depend on the rayon pool size.
#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(p, out_row): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Four-lane accumulation keeps the reduction order fixed and vectorizable.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let base = c * 4;
        for l in 0..4 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a 3D cross-correlation over `[C, D, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv3dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Conv3dGeom {
    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output indices `o` along `axis` whose input coordinate for kernel offset
    /// `kk` lands inside the input, as a half-open range.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let s = self.stride[axis];
        let p = self.padding[axis];
        let n_in = self.in_dims[axis];
        let n_out = self.out_dims[axis];
        // need 0 <= o*s + kk - p < n_in
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi_excl = if n_in + p > kk {
            ((n_in + p - kk - 1) / s + 1).min(n_out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(input: &[T], weight: &[T], g: &Conv3dGeom) -> Vec<T> {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); g.c_out * out_len];
    let work = g.c_out * g.c_in * g.k_len() * out_len;
    let per_channel = |(co, out_c): (usize, &mut [T])| {
        for ci in 0..g.c_in {
            let in_c = &input[ci * g.in_len()..(ci + 1) * g.in_len()];
            let w_base = (co * g.c_in + ci) * g.k_len();
            for kd in 0..g.kernel[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.kernel[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.kernel[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let wv = weight[w_base + (kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                        if wv == T::zero() || w0 >= w1 {
                            continue;
                        }
                        for od in d0..d1 {
                            let id = od * g.stride[0] + kd - g.padding[0];
                            for oh in h0..h1 {
                                let ih = oh * g.stride[1] + kh - g.padding[1];
                                let in_row = &in_c[(id * g.in_dims[1] + ih) * g.in_dims[2]..];
                                let out_row = &mut out_c[(od * g.out_dims[1] + oh) * g.out_dims[2]..];
                                let sw = g.stride[2];
                                let off = kw as isize - g.padding[2] as isize;
                                for ow in w0..w1 {
                                    let iw = (ow * sw) as isize + off;
                                    out_row[ow] += wv * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && g.c_out > 1 {
        out.par_chunks_mut(out_len).enumerate().for_each(per_channel);
    } else {
        out.chunks_mut(out_len).enumerate().for_each(per_channel);
    }
    out
}

pub(crate) fn conv3d_grad_input<T: Scalar>(grad_out: &[T], weight: &[T], g: &Conv3dGeom) -> Vec<T> {
    let in_len = g.in_len();
    let out_len = g.out_len();
    let mut grad_in = vec![T::zero(); g.c_in * in_len];
    let work = g.c_out * g.c_in * g.k_len() * out_len;
    let per_channel = |(ci, gin_c): (usize, &mut [T])| {
        for co in 0..g.c_out {
            let gout_c = &grad_out[co * out_len..(co + 1) * out_len];
            let w_base = (co * g.c_in + ci) * g.k_len();
            for kd in 0..g.kernel[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.kernel[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.kernel[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let wv = weight[w_base + (kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                        if wv == T::zero() || w0 >= w1 {
                            continue;
                        }
                        for od in d0..d1 {
                            let id = od * g.stride[0] + kd - g.padding[0];
                            for oh in h0..h1 {
                                let ih = oh * g.stride[1] + kh - g.padding[1];
                                let gin_row = &mut gin_c[(id * g.in_dims[1] + ih) * g.in_dims[2]..];
                                let gout_row = &gout_c[(od * g.out_dims[1] + oh) * g.out_dims[2]..];
                                let sw = g.stride[2];
                                let off = kw as isize - g.padding[2] as isize;
                                for ow in w0..w1 {
                                    let iw = (ow * sw) as isize + off;
                                    gin_row[iw as usize] += wv * gout_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && g.c_in > 1 {
        grad_in.par_chunks_mut(in_len).enumerate().for_each(per_channel);
    } else {
        grad_in.chunks_mut(in_len).enumerate().for_each(per_channel);
    }
    grad_in
}

pub(crate) fn conv3d_grad_weight<T: Scalar>(grad_out: &[T], input: &[T], g: &Conv3dGeom) -> Vec<T> {
    let in_len = g.in_len();
    let out_len = g.out_len();
    let per_out = g.c_in * g.k_len();
    let mut grad_w = vec![T::zero(); g.c_out * per_out];
    let work = g.c_out * g.c_in * g.k_len() * out_len;
    let per_channel = |(co, gw_c): (usize, &mut [T])| {
        let gout_c = &grad_out[co * out_len..(co + 1) * out_len];
        for ci in 0..g.c_in {
            let in_c = &input[ci * in_len..(ci + 1) * in_len];
            for kd in 0..g.kernel[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.kernel[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.kernel[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let mut acc = T::zero();
                        for od in d0..d1 {
                            let id = od * g.stride[0] + kd - g.padding[0];
                            for oh in h0..h1 {
                                let ih = oh * g.stride[1] + kh - g.padding[1];
                                let in_row = &in_c[(id * g.in_dims[1] + ih) * g.in_dims[2]..];
                                let gout_row = &gout_c[(od * g.out_dims[1] + oh) * g.out_dims[2]..];
                                let sw = g.stride[2];
                                let off = kw as isize - g.padding[2] as isize;
                                for ow in w0..w1 {
                                    let iw = (ow * sw) as isize + off;
                                    acc += gout_row[ow] * in_row[iw as usize];
                                }
                            }
                        }
                        gw_c[ci * g.k_len() + (kd * g.kernel[1] + kh) * g.kernel[2] + kw] = acc;
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && g.c_out > 1 {
        grad_w.par_chunks_mut(per_out).enumerate().for_each(per_channel);
    } else {
        grad_w.chunks_mut(per_out).enumerate().for_each(per_channel);
    }
    grad_w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n_in in 1..7 {
            for k in 1..4 {
                for s in 1..3 {
                    for p in 0..3 {
                        if n_in + 2 * p < k {
                            continue;
                        }
                        let n_out = (n_in + 2 * p - k) / s + 1;
                        let g = Conv3dGeom {
                            c_in: 1,
                            c_out: 1,
                            in_dims: [n_in, 1, 1],
                            kernel: [k, 1, 1],
                            stride: [s, 1, 1],
                            padding: [p, 0, 0],
                            out_dims: [n_out, 1, 1],
                        };
                        for kk in 0..k {
                            let (lo, hi) = g.valid(0, kk);
                            for o in 0..n_out {
                                let pos = (o * s + kk) as isize - p as isize;
                                let inside = pos >= 0 && (pos as usize) < n_in;
                                assert_eq!(inside, o >= lo && o < hi, "n_in={n_in} k={k} s={s} p={p}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        matmul_nn(&a, &b, &mut nn, 2, 3, 4);
        // b^T as 4x3
        let bt: Vec<f64> = (0..4)
            .flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f64 * 0.5))
            .collect();
        let mut nt = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut nt, 2, 3, 4);
        assert_eq!(nn, nt);
        // a^T as 3x2, tn(a^T stored as 2x3 = a) recovers nn
        let mut tn = vec![0.0; 8];
        let at: Vec<f64> = (0..3)
            .flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64 - 2.0))
            .collect();
        // out[k=2? ] -- tn computes a^T b with a [m,k]; use a^T as [3,2] to get [2,4]
        matmul_tn(&at, &b, &mut tn, 3, 2, 4);
        assert_eq!(nn, tn);
    }
}
