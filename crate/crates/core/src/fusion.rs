//! Ensemble fusion of the two similarity maps.
//!
//! The KL-optimal combination of probability-normalized maps is their
//! elementwise mean; the runtime fusion is the learnable affine form
//! f = (alpha*f_struct + beta*f_sem)/2 + b applied to raw maps, whose
//! unweighted initialization (alpha = beta = 1, b = 0) coincides with
//! that mean. Normalization exists to validate the derivation and to
//! condition response maps, not as a runtime step of fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor::{SimilarityMap, Tensor};

/// Scalar fusion weights; `bias` is the sum of the two 1x1 conv biases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            bias: 0.0,
        }
    }
}

/// Non-negative map summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<S: Scalar>(Tensor<S>);

impl<S: Scalar> ProbabilityMap<S> {
    /// Validates non-negativity and unit mass (tolerance 1e-6).
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::DegenerateMap("negative mass".into()));
        }
        let total = to_f64(t.sum());
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateMap(format!("mass {} != 1", total)));
        }
        Ok(Self(t))
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// Shift by the minimum and divide by the sum. Constant maps have no
/// mass to distribute and are rejected.
pub fn normalize_to_distribution<S: Scalar>(map: &SimilarityMap<S>) -> Result<ProbabilityMap<S>> {
    let lo = map.min();
    let shifted = map.map(|v| v - lo);
    let total = shifted.sum();
    if !(to_f64(total) > 0.0) {
        return Err(Error::DegenerateMap(
            "constant map cannot be normalized".into(),
        ));
    }
    ProbabilityMap::new(shifted.map(|v| v / total))
}

/// KL(S || Q) = sum s * ln(s/q), natural log, with 0*ln(0/q) = 0.
/// Requires q > 0 wherever s > 0.
pub fn kl_divergence<S: Scalar>(s: &ProbabilityMap<S>, q: &ProbabilityMap<S>) -> Result<f64> {
    if s.as_tensor().shape() != q.as_tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!(
                "{:?} vs {:?}",
                s.as_tensor().shape(),
                q.as_tensor().shape()
            ),
        });
    }
    let mut acc = 0.0f64;
    for (i, (&sv, &qv)) in s
        .as_tensor()
        .data()
        .iter()
        .zip(q.as_tensor().data())
        .enumerate()
    {
        let (sv, qv) = (to_f64(sv), to_f64(qv));
        if sv > 0.0 {
            if qv <= 0.0 {
                return Err(Error::SupportViolation(i));
            }
            acc += sv * (sv / qv).ln();
        }
    }
    Ok(acc)
}

/// Minimizer of sum_k KL(S^k || Q) over the simplex: the elementwise mean.
pub fn fuse_kl_optimal<S: Scalar>(maps: &[ProbabilityMap<S>]) -> Result<ProbabilityMap<S>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::DegenerateMap("no maps to fuse".into()))?;
    let shape = first.as_tensor().shape().to_vec();
    let mut acc = vec![S::zero(); first.as_tensor().numel()];
    for m in maps {
        if m.as_tensor().shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "fuse_kl_optimal",
                detail: format!("{:?} vs {:?}", m.as_tensor().shape(), shape),
            });
        }
        for (a, &b) in acc.iter_mut().zip(m.as_tensor().data()) {
            *a += b;
        }
    }
    let inv = cast::<S>(1.0 / maps.len() as f64);
    ProbabilityMap::new(Tensor::new(shape, acc.iter().map(|&v| v * inv).collect())?)
}

/// f = (alpha*f_struct + beta*f_sem)/2 + b, elementwise on raw maps.
pub fn ren_forward<S: Scalar>(
    f_struct: &SimilarityMap<S>,
    f_sem: &SimilarityMap<S>,
    p: &FusionParams,
) -> Result<SimilarityMap<S>> {
    let (a, b, bias) = (cast::<S>(p.alpha), cast::<S>(p.beta), cast::<S>(p.bias));
    let half = cast::<S>(0.5);
    f_struct.zip(f_sem, "ren_forward", move |fs, fm| {
        (a * fs + b * fm) * half + bias
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn pmap(shape: &[usize], vals: &[f64]) -> ProbabilityMap<f64> {
        ProbabilityMap::new(Tensor::from_f64(shape, vals).unwrap()).unwrap()
    }

    #[test]
    fn normalize_shift_and_scale() {
        let s = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 3.0]).unwrap();
        let p = normalize_to_distribution(&s).unwrap();
        assert_eq!(p.as_tensor().data(), &[0.0, 1.0]);

        // Already a distribution with min 0: unchanged.
        let d = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.5, 0.25, 0.25]).unwrap();
        let q = normalize_to_distribution(&d).unwrap();
        assert_eq!(q.as_tensor().data(), d.data());

        let c = Tensor::<f64>::from_f64(&[2, 2], &[0.7; 4]).unwrap();
        assert!(matches!(
            normalize_to_distribution(&c),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn kl_basic_values() {
        let a = pmap(&[1, 2], &[0.5, 0.5]);
        let b = pmap(&[1, 2], &[0.25, 0.75]);
        assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = SplitMix64::new(20);
        for _ in 0..1000 {
            let mk = |rng: &mut SplitMix64| {
                let raw: Vec<f64> = (0..6).map(|_| -rng.next_f64().max(1e-12).ln()).collect();
                let s: f64 = raw.iter().sum();
                pmap(&[2, 3], &raw.iter().map(|v| v / s).collect::<Vec<_>>())
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_support_violation() {
        let p = pmap(&[1, 2], &[0.5, 0.5]);
        let q = pmap(&[1, 2], &[1.0, 0.0]);
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::SupportViolation(1))
        ));
    }

    #[test]
    fn fuse_is_elementwise_mean() {
        let s1 = pmap(&[1, 2], &[0.2, 0.8]);
        let s2 = pmap(&[1, 2], &[0.6, 0.4]);
        let q = fuse_kl_optimal(&[s1.clone(), s2]).unwrap();
        assert!((q.as_tensor().data()[0] - 0.4).abs() < 1e-12);
        assert!((q.as_tensor().data()[1] - 0.6).abs() < 1e-12);
        // n = 1: identity.
        let one = fuse_kl_optimal(&[s1.clone()]).unwrap();
        assert_eq!(one.as_tensor(), s1.as_tensor());
        // Self-fusion has zero divergence.
        let selfq = fuse_kl_optimal(&[s1.clone(), s1.clone()]).unwrap();
        assert_eq!(kl_divergence(&s1, &selfq).unwrap(), 0.0);
    }

    #[test]
    fn ren_forward_arithmetic() {
        let m = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.4]).unwrap();
        let id = ren_forward(&m, &m, &FusionParams::default()).unwrap();
        assert_eq!(id.data(), m.data());

        let fs = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let fm = Tensor::zeros(&[1, 2]);
        let p = FusionParams {
            alpha: 2.0,
            beta: 0.0,
            bias: 1.0,
        };
        let out = ren_forward(&fs, &fm, &p).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let bad = Tensor::zeros(&[2, 2]);
        assert!(ren_forward(&fs, &bad, &FusionParams::default()).is_err());
    }

    #[test]
    fn argmax_invariant_under_affine_reweighting() {
        let mut rng = SplitMix64::new(30);
        for _ in 0..100 {
            let fs = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
            let fm = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
            let p = FusionParams {
                alpha: rng.range_f64(0.2, 2.0),
                beta: rng.range_f64(0.2, 2.0),
                bias: rng.range_f64(-1.0, 1.0),
            };
            let c = rng.range_f64(0.1, 5.0);
            let d = rng.range_f64(-3.0, 3.0);
            let scaled = FusionParams {
                alpha: c * p.alpha,
                beta: c * p.beta,
                bias: c * p.bias + d,
            };
            let m1 = ren_forward(&fs, &fm, &p).unwrap();
            let m2 = ren_forward(&fs, &fm, &scaled).unwrap();
            assert_eq!(m1.argmax2(), m2.argmax2());
        }
    }
}
