//! 2-D discrete Fourier transforms and complex elementwise arithmetic.
//!
//! Transforms are row-column DFTs with twiddle factors tabulated in f64.
//! Map sizes in this crate are tens of cells per side, so the O(n^2)
//! per-axis transform is not a bottleneck. Correctness is pinned by the
//! round-trip and Parseval properties, not by a particular algorithm.

use crate::error::{Error, Result};
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor::Tensor;

/// Modulus guard below which complex division is refused.
pub const DIV_GUARD: f64 = 1e-12;

/// Dense complex array, interleaved (re, im) pairs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<S: Scalar> {
    shape: Vec<usize>,
    /// 2 * product(shape) scalars: re0, im0, re1, im1, ...
    data: Vec<S>,
}

impl<S: Scalar> ComplexTensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); 2 * numel],
        }
    }

    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != 2 * numel {
            return Err(Error::ShapeMismatch {
                op: "complex_new",
                detail: format!("shape {:?} needs {} scalars, got {}", shape, 2 * numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len() / 2
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn re(&self, i: usize) -> S {
        self.data[2 * i]
    }

    pub fn im(&self, i: usize) -> S {
        self.data[2 * i + 1]
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.numel() {
            out.data[2 * i + 1] = -out.data[2 * i + 1];
        }
        out
    }

    /// Elementwise complex product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "complex_mul")?;
        let mut out = Self::zeros(&self.shape);
        for i in 0..self.numel() {
            let (ar, ai) = (self.re(i), self.im(i));
            let (br, bi) = (other.re(i), other.im(i));
            out.data[2 * i] = ar * br - ai * bi;
            out.data[2 * i + 1] = ar * bi + ai * br;
        }
        Ok(out)
    }

    /// Elementwise complex division; fails when a denominator modulus
    /// falls below [`DIV_GUARD`].
    pub fn div(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "complex_div")?;
        let mut out = Self::zeros(&self.shape);
        for i in 0..self.numel() {
            let (ar, ai) = (self.re(i), self.im(i));
            let (br, bi) = (other.re(i), other.im(i));
            let denom = br * br + bi * bi;
            let modulus = to_f64(denom).sqrt();
            if modulus < DIV_GUARD {
                return Err(Error::DegenerateDenominator {
                    op: "complex_div",
                    value: modulus,
                    guard: DIV_GUARD,
                });
            }
            out.data[2 * i] = (ar * br + ai * bi) / denom;
            out.data[2 * i + 1] = (ai * br - ar * bi) / denom;
        }
        Ok(out)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }
}

/// Twiddle table for a 1-D DFT of length n: cos/sin of 2*pi*k*j/n.
struct Twiddles<S> {
    n: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> Twiddles<S> {
    fn new(n: usize) -> Self {
        let mut cos = Vec::with_capacity(n * n);
        let mut sin = Vec::with_capacity(n * n);
        for k in 0..n {
            for j in 0..n {
                let angle = std::f64::consts::TAU * ((k * j) % n) as f64 / n as f64;
                cos.push(cast::<S>(angle.cos()));
                sin.push(cast::<S>(angle.sin()));
            }
        }
        Self { n, cos, sin }
    }

    /// One forward (sign = -1) or inverse-unnormalized (sign = +1) DFT of
    /// `n` interleaved complex entries with stride `stride` pairs.
    fn transform(&self, data: &mut [S], start: usize, stride: usize, sign: S) {
        let n = self.n;
        let mut out = vec![S::zero(); 2 * n];
        for k in 0..n {
            let mut re = S::zero();
            let mut im = S::zero();
            for j in 0..n {
                let c = self.cos[k * n + j];
                let s = self.sin[k * n + j] * sign;
                let xr = data[2 * (start + j * stride)];
                let xi = data[2 * (start + j * stride) + 1];
                re = re + xr * c - xi * s;
                im = im + xr * s + xi * c;
            }
            out[2 * k] = re;
            out[2 * k + 1] = im;
        }
        for k in 0..n {
            data[2 * (start + k * stride)] = out[2 * k];
            data[2 * (start + k * stride) + 1] = out[2 * k + 1];
        }
    }
}

fn dft2_inplace<S: Scalar>(data: &mut [S], h: usize, w: usize, inverse: bool) {
    let sign = if inverse { S::one() } else { -S::one() };
    let tw_w = Twiddles::<S>::new(w);
    for r in 0..h {
        tw_w.transform(data, r * w, 1, sign);
    }
    let tw_h = Twiddles::<S>::new(h);
    for c in 0..w {
        tw_h.transform(data, c, w, sign);
    }
    if inverse {
        let norm = cast::<S>(1.0 / (h * w) as f64);
        for v in data.iter_mut() {
            *v = *v * norm;
        }
    }
}

/// Forward 2-D DFT of a real H x W tensor.
pub fn fft2<S: Scalar>(t: &Tensor<S>) -> Result<ComplexTensor<S>> {
    let (h, w) = plane_dims(t.shape(), "fft2")?;
    let mut data = vec![S::zero(); 2 * h * w];
    for (i, &v) in t.data().iter().enumerate() {
        data[2 * i] = v;
    }
    dft2_inplace(&mut data, h, w, false);
    ComplexTensor::new(vec![h, w], data)
}

/// Inverse 2-D DFT; returns the real part (the spectra handled here are
/// conjugate-symmetric up to rounding).
pub fn ifft2<S: Scalar>(c: &ComplexTensor<S>) -> Result<Tensor<S>> {
    let (h, w) = plane_dims(c.shape(), "ifft2")?;
    let mut data = c.data().to_vec();
    dft2_inplace(&mut data, h, w, true);
    let re: Vec<S> = (0..h * w).map(|i| data[2 * i]).collect();
    Tensor::new(vec![h, w], re)
}

/// Full inverse transform keeping imaginary parts, for tests.
pub fn ifft2_complex<S: Scalar>(c: &ComplexTensor<S>) -> Result<ComplexTensor<S>> {
    let (h, w) = plane_dims(c.shape(), "ifft2")?;
    let mut data = c.data().to_vec();
    dft2_inplace(&mut data, h, w, true);
    ComplexTensor::new(vec![h, w], data)
}

/// Raw interleaved transform over `channels` independent H x W planes.
/// `data` holds 2*channels*h*w scalars. Used by the autodiff layer.
pub(crate) fn dft2_batched<S: Scalar>(
    data: &mut [S],
    channels: usize,
    h: usize,
    w: usize,
    inverse: bool,
) {
    for ch in 0..channels {
        let plane = &mut data[2 * ch * h * w..2 * (ch + 1) * h * w];
        dft2_inplace(plane, h, w, inverse);
    }
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected 2-D plane, got {:?}", shape),
        });
    }
    Ok((shape[0], shape[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn constant_image_is_dc_only() {
        let t = Tensor::<f64>::filled(&[3, 5], 2.5);
        let spec = fft2(&t).unwrap();
        assert!((spec.re(0) - 2.5 * 15.0).abs() < 1e-10);
        assert!(spec.im(0).abs() < 1e-10);
        for i in 1..spec.numel() {
            assert!(spec.re(i).abs() < 1e-9 && spec.im(i).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = SplitMix64::new(3);
        let t = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let back = ifft2(&fft2(&t).unwrap()).unwrap();
        let scale = t.data().iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn parseval_identity() {
        // Direct double-sum oracle on a random 4x6 input.
        let mut rng = SplitMix64::new(9);
        let t = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let spatial: f64 = t.data().iter().map(|v| v * v).sum();
        let spec = fft2(&t).unwrap();
        let freq: f64 = (0..spec.numel())
            .map(|i| spec.re(i) * spec.re(i) + spec.im(i) * spec.im(i))
            .sum::<f64>()
            / 24.0;
        assert!((spatial - freq).abs() / spatial.abs() < 1e-5);
    }

    #[test]
    fn division_guard() {
        let a = ComplexTensor::<f64>::new(vec![1, 1], vec![1.0, 0.0]).unwrap();
        let b = ComplexTensor::<f64>::new(vec![1, 1], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            a.div(&b),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn mul_div_round_trip() {
        let mut rng = SplitMix64::new(17);
        let mut mk = |sh: &[usize]| {
            let n: usize = sh.iter().product();
            let data = (0..2 * n).map(|_| rng.next_normal() + 0.5).collect();
            ComplexTensor::<f64>::new(sh.to_vec(), data).unwrap()
        };
        let a = mk(&[3, 4]);
        let b = mk(&[3, 4]);
        let c = a.mul(&b).unwrap().div(&b).unwrap();
        for i in 0..a.numel() {
            assert!((a.re(i) - c.re(i)).abs() < 1e-9);
            assert!((a.im(i) - c.im(i)).abs() < 1e-9);
        }
    }
}
