//! Raw convolution arithmetic shared by the forward ops and their adjoints.
//!
//! Convolution here means cross-correlation (no kernel flip), the tracker
//! convention. Kernels are laid out [out_ch, in_ch, kh, kw]; transposed
//! convolution kernels are [in_ch, out_ch, kh, kw] so that the same buffer
//! works for an op and its adjoint.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// floor((n + 2p - k)/s) + 1, or None when the result would be < 1.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a stride-`s` transposed convolution: (n-1)*s + k.
pub fn conv_transpose_out_dim(n: usize, k: usize, stride: usize) -> usize {
    (n - 1) * stride + k
}

/// Range of j in [0, jmax) such that 0 <= j*stride + off < limit.
#[inline]
fn jrange(jmax: usize, limit: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_excl = if (limit as isize) <= off {
        0
    } else {
        ((limit as isize - 1 - off) as usize / stride + 1).min(jmax)
    };
    (lo.min(hi_excl), hi_excl)
}

pub struct ConvDims {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn infer(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        if x_shape.len() != 3 || k_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernels {:?}", x_shape, k_shape),
            });
        }
        let (in_ch, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (out_ch, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, kernels expect {}", in_ch, kc),
            });
        }
        let oh = conv_out_dim(h, kh, stride, pad.0);
        let ow = conv_out_dim(w, kw, stride, pad.1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "kernel {}x{} with pad {:?} exceeds input {}x{}",
                        kh, kw, pad, h, w
                    ),
                })
            }
        };
        Ok(Self {
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }
}

/// out[k,i,j] = bias[k] + sum_{c,u,v} x[c, i*s-ph+u, j*s-pw+v] * kern[k,c,u,v]
pub fn conv2d_forward<S: Scalar>(x: &[S], kern: &[S], bias: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.out_ch * d.oh * d.ow];
    for k in 0..d.out_ch {
        if let Some(b) = bias {
            let bk = b[k];
            for v in out[k * d.oh * d.ow..(k + 1) * d.oh * d.ow].iter_mut() {
                *v = bk;
            }
        }
        for c in 0..d.in_ch {
            for u in 0..d.kh {
                let krow = &kern[((k * d.in_ch + c) * d.kh + u) * d.kw..][..d.kw];
                for i in 0..d.oh {
                    let y = (i * d.stride + u) as isize - d.pad.0 as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let xrow = &x[(c * d.h + y as usize) * d.w..][..d.w];
                    let orow = &mut out[(k * d.oh + i) * d.ow..][..d.ow];
                    for (v, &kv) in krow.iter().enumerate() {
                        let off = v as isize - d.pad.1 as isize;
                        let (j0, j1) = jrange(d.ow, d.w, d.stride, off);
                        for (j, o) in orow.iter_mut().enumerate().take(j1).skip(j0) {
                            *o += kv * xrow[((j * d.stride) as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// dx[c,y,x] = sum over (k,i,j,u,v) with y=i*s-ph+u, x=j*s-pw+v of
/// g[k,i,j]*kern[k,c,u,v]. Also the forward pass of transposed convolution.
pub fn conv2d_input_grad<S: Scalar>(g: &[S], kern: &[S], d: &ConvDims) -> Vec<S> {
    let mut dx = vec![S::zero(); d.in_ch * d.h * d.w];
    for k in 0..d.out_ch {
        for c in 0..d.in_ch {
            for u in 0..d.kh {
                let krow = &kern[((k * d.in_ch + c) * d.kh + u) * d.kw..][..d.kw];
                for i in 0..d.oh {
                    let y = (i * d.stride + u) as isize - d.pad.0 as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let grow = &g[(k * d.oh + i) * d.ow..][..d.ow];
                    let xrow = &mut dx[(c * d.h + y as usize) * d.w..][..d.w];
                    for (v, &kv) in krow.iter().enumerate() {
                        let off = v as isize - d.pad.1 as isize;
                        let (j0, j1) = jrange(d.ow, d.w, d.stride, off);
                        for (j, &gj) in grow.iter().enumerate().take(j1).skip(j0) {
                            xrow[((j * d.stride) as isize + off) as usize] += kv * gj;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// dk[k,c,u,v] = sum_{i,j} g[k,i,j] * x[c, i*s-ph+u, j*s-pw+v]
pub fn conv2d_kernel_grad<S: Scalar>(x: &[S], g: &[S], d: &ConvDims) -> Vec<S> {
    let mut dk = vec![S::zero(); d.out_ch * d.in_ch * d.kh * d.kw];
    for k in 0..d.out_ch {
        for c in 0..d.in_ch {
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let off = v as isize - d.pad.1 as isize;
                    let (j0, j1) = jrange(d.ow, d.w, d.stride, off);
                    let mut acc = S::zero();
                    for i in 0..d.oh {
                        let y = (i * d.stride + u) as isize - d.pad.0 as isize;
                        if y < 0 || y >= d.h as isize {
                            continue;
                        }
                        let grow = &g[(k * d.oh + i) * d.ow..][..d.ow];
                        let xrow = &x[(c * d.h + y as usize) * d.w..][..d.w];
                        for (j, &gj) in grow.iter().enumerate().take(j1).skip(j0) {
                            acc += gj * xrow[((j * d.stride) as isize + off) as usize];
                        }
                    }
                    dk[((k * d.in_ch + c) * d.kh + u) * d.kw + v] = acc;
                }
            }
        }
    }
    dk
}

/// db[k] = sum_{i,j} g[k,i,j]
pub fn conv2d_bias_grad<S: Scalar>(g: &[S], d: &ConvDims) -> Vec<S> {
    (0..d.out_ch)
        .map(|k| {
            g[k * d.oh * d.ow..(k + 1) * d.oh * d.ow]
                .iter()
                .fold(S::zero(), |a, &b| a + b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn randv(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.next_normal()).collect()
    }

    /// Independent sliding-window oracle, plain index arithmetic.
    fn conv_oracle(
        x: &[f64],
        kern: &[f64],
        bias: Option<&[f64]>,
        d: &ConvDims,
    ) -> Vec<f64> {
        let mut out = vec![0.0; d.out_ch * d.oh * d.ow];
        for k in 0..d.out_ch {
            for i in 0..d.oh {
                for j in 0..d.ow {
                    let mut acc = bias.map_or(0.0, |b| b[k]);
                    for c in 0..d.in_ch {
                        for u in 0..d.kh {
                            for v in 0..d.kw {
                                let y = (i * d.stride + u) as isize - d.pad.0 as isize;
                                let xx = (j * d.stride + v) as isize - d.pad.1 as isize;
                                if y >= 0 && y < d.h as isize && xx >= 0 && xx < d.w as isize {
                                    acc += x[(c * d.h + y as usize) * d.w + xx as usize]
                                        * kern[((k * d.in_ch + c) * d.kh + u) * d.kw + v];
                                }
                            }
                        }
                    }
                    out[(k * d.oh + i) * d.ow + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = SplitMix64::new(21);
        for &(c, h, w, k, kh, kw, s, ph, pw) in &[
            (1usize, 5usize, 5usize, 1usize, 3usize, 3usize, 1usize, 0usize, 0usize),
            (2, 6, 7, 3, 3, 2, 1, 1, 1),
            (3, 9, 8, 2, 5, 3, 2, 0, 1),
            (1, 7, 7, 4, 7, 7, 2, 3, 3),
        ] {
            let d = ConvDims::infer(&[c, h, w], &[k, c, kh, kw], s, (ph, pw)).unwrap();
            let x = randv(c * h * w, &mut rng);
            let kern = randv(k * c * kh * kw, &mut rng);
            let b = randv(k, &mut rng);
            let got = conv2d_forward(&x, &kern, Some(&b), &d);
            let want = conv_oracle(&x, &kern, Some(&b), &d);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn identity_kernel_doubles_input() {
        // 1x1 kernel of value 2, zero bias: output is twice the input.
        let d = ConvDims::infer(&[1, 3, 3], &[1, 1, 1, 1], 1, (0, 0)).unwrap();
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let out = conv2d_forward(&x, &[2.0], None, &d);
        for (o, i) in out.iter().zip(&x) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn two_by_two_diagonal_window() {
        // [[1,2],[3,4]] against kernel [[1,0],[0,1]] -> 1 + 4 = 5.
        let d = ConvDims::infer(&[1, 2, 2], &[1, 1, 2, 2], 1, (0, 0)).unwrap();
        let out = conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], None, &d);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn same_padding_preserves_dims() {
        // kH = 2*pad + 1, stride 1 keeps spatial dims.
        for &(n, k) in &[(5usize, 3usize), (9, 5), (11, 7)] {
            let p = (k - 1) / 2;
            assert_eq!(conv_out_dim(n, k, 1, p), Some(n));
        }
    }

    #[test]
    fn shape_errors() {
        assert!(ConvDims::infer(&[2, 4, 4], &[1, 3, 3, 3], 1, (0, 0)).is_err());
        assert!(ConvDims::infer(&[1, 2, 2], &[1, 1, 3, 3], 1, (0, 0)).is_err());
    }

    #[test]
    fn linear_in_input() {
        let mut rng = SplitMix64::new(33);
        let d = ConvDims::infer(&[2, 6, 6], &[3, 2, 3, 3], 1, (1, 1)).unwrap();
        let x1 = randv(72, &mut rng);
        let x2 = randv(72, &mut rng);
        let kern = randv(3 * 2 * 9, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv2d_forward(&mixed, &kern, None, &d);
        let y1 = conv2d_forward(&x1, &kern, None, &d);
        let y2 = conv2d_forward(&x2, &kern, None, &d);
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * y1[i] + b * y2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn input_grad_is_adjoint() {
        // <conv(a, W), b> == <a, adjoint(b, W)> on random tensors.
        let mut rng = SplitMix64::new(55);
        for &(s, ph, pw) in &[(1usize, 0usize, 0usize), (2, 1, 0), (1, 1, 1)] {
            let d = ConvDims::infer(&[2, 6, 7], &[3, 2, 3, 3], s, (ph, pw)).unwrap();
            let a = randv(d.in_ch * d.h * d.w, &mut rng);
            let kern = randv(3 * 2 * 9, &mut rng);
            let b = randv(d.out_ch * d.oh * d.ow, &mut rng);
            let fwd = conv2d_forward(&a, &kern, None, &d);
            let adj = conv2d_input_grad(&b, &kern, &d);
            let lhs: f64 = fwd.iter().zip(&b).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.iter().zip(&adj).map(|(x, y)| x * y).sum();
            assert!(
                (lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-5,
                "adjoint identity failed: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transpose_spreads_single_pixel() {
        // Transposed conv of a single pixel v with kernel K is v*K.
        let d = ConvDims::infer(&[1, 3, 3], &[1, 1, 3, 3], 1, (0, 0)).unwrap();
        let kern: Vec<f64> = (1..=9).map(f64::from).collect();
        let g = [2.5];
        let out = conv2d_input_grad(&g, &kern, &d);
        for (o, k) in out.iter().zip(&kern) {
            assert_eq!(*o, 2.5 * k);
        }
    }

    #[test]
    fn transpose_zero_is_zero() {
        let d = ConvDims::infer(&[1, 5, 5], &[1, 1, 3, 3], 2, (0, 0)).unwrap();
        let out = conv2d_input_grad(&vec![0.0; d.oh * d.ow], &vec![1.0; 9], &d);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
