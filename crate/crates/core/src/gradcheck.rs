//! Central finite-difference verification of the reverse pass.
//!
//! Always runs in f64. The numeric route rebuilds the graph from perturbed
//! copies of the inputs and never touches the analytic gradients it checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Max over all input entries of |analytic - numeric| relative error,
/// with the denominator floored at 1e-8.
///
/// `build` must construct the loss node from freshly inserted parameter
/// leaves each time it is called; inputs should sit away from ReLU kinks.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (mut g, ids, loss) = eval(inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("param grad").data().to_vec())
        .collect();

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[ei] += epsilon;
            let (gp, _, lp) = eval(&plus)?;
            let fp = gp.value(lp).data()[0];

            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[ei] -= epsilon;
            let (gm, _, lm) = eval(&minus)?;
            let fm = gm.value(lm).data()[0];

            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn linear_map_is_exact_to_fd_noise() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let s = g.mul_const(ids[0], 1.75);
                Ok(g.sum(s))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-7, "linear FD error {err}");
    }

    #[test]
    fn sigmoid_chain() {
        let mut rng = SplitMix64::new(6);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let m = g.mul(ids[0], ids[1])?;
                let s = g.sigmoid(m);
                let s2 = g.sigmoid(s);
                Ok(g.sum(s2))
            },
            &[x, w],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "sigmoid chain FD error {err}");
    }

    #[test]
    fn conv_and_transpose_stack() {
        let mut rng = SplitMix64::new(8);
        let x = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.7, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let dk = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.7, &mut rng);
        let db = Tensor::<f64>::randn(&[2], 0.5, &mut rng);
        let err = grad_check(
            |g, ids| {
                let c = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, (1, 0))?;
                let t = g.conv_transpose2d(c, ids[3], Some(ids[4]), 1)?;
                let s = g.sigmoid(t);
                Ok(g.sum(s))
            },
            &[x, k, b, dk, db],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "conv stack FD error {err}");
    }

    #[test]
    fn pools_and_broadcast() {
        let mut rng = SplitMix64::new(12);
        let x = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let scaled = g.scale_broadcast(ids[0], ids[1])?;
                let p = g.max_pool2(scaled)?;
                let a = g.global_avg_pool(p)?;
                let m = g.global_max_pool(p)?;
                let s = g.add(a, m)?;
                let sg = g.sigmoid(s);
                Ok(g.sum(sg))
            },
            &[x, w],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "pool/broadcast FD error {err}");
    }

    #[test]
    fn fft_complex_pipeline() {
        let mut rng = SplitMix64::new(14);
        let x = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let fx = g.fft2(ids[0])?;
                let fy = g.fft2(ids[1])?;
                let prod = g.complex_mul(fx, fy)?;
                let mag = g.complex_abs_sq(fx)?;
                let den0 = g.channel_sum(mag)?;
                let den = g.add_const(den0, 0.1);
                let quot = g.complex_real_div(prod, den)?;
                let back = g.ifft2_real(quot)?;
                let s = g.sigmoid(back);
                Ok(g.sum(s))
            },
            &[x, y],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "fft pipeline FD error {err}");
    }

    #[test]
    fn cross_correlate_and_loss() {
        let mut rng = SplitMix64::new(16);
        let t = Tensor::<f64>::randn(&[2, 2, 2], 1.0, &mut rng);
        let s = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
        let labels = Tensor::<f64>::from_f64(
            &[3, 4],
            &[1., -1., -1., -1., -1., 1., -1., -1., -1., -1., 1., -1.],
        )
        .unwrap();
        let weights = Tensor::<f64>::filled(&[3, 4], 1.0 / 12.0);
        let err = grad_check(
            |g, ids| {
                let m = g.cross_correlate(ids[0], ids[1])?;
                g.logistic_loss(m, &labels, &weights)
            },
            &[t, s],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "xcorr/loss FD error {err}");
    }

    #[test]
    fn scalar_fusion_params() {
        let mut rng = SplitMix64::new(18);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let alpha = Tensor::<f64>::scalar(1.2);
        let beta = Tensor::<f64>::scalar(0.8);
        let bias = Tensor::<f64>::scalar(-0.1);
        let err = grad_check(
            |g, ids| {
                let sa = g.scalar_mul(ids[0], ids[2])?;
                let sb = g.scalar_mul(ids[1], ids[3])?;
                let sum = g.add(sa, sb)?;
                let half = g.mul_const(sum, 0.5);
                let f = g.scalar_add(half, ids[4])?;
                let sg = g.sigmoid(f);
                Ok(g.sum(sg))
            },
            &[a, b, alpha, beta, bias],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "fusion scalar FD error {err}");
    }
}
