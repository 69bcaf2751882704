//! The two correlation-similarity heads.
//!
//! The structural head gates the reduced shallow feature with a spatial
//! weight map produced by a conv/deconv sandwich; the semantic head gates
//! the deep feature with a channel weight vector produced from global
//! average and max pooling through a shared two-layer 1x1 stack. Both
//! heads then pass the gated exemplar feature through a closed-form
//! correlation-filter solve before correlating against the raw search
//! feature, so attention and the filter touch the exemplar branch only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Correlation-filter block settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CFBlockParams {
    /// Ridge regularizer; guarded at 1e-6.
    pub lambda: f64,
    /// Gaussian label bandwidth; None derives min(h,w)/8.
    pub sigma: Option<f64>,
}

impl Default for CFBlockParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            sigma: None,
        }
    }
}

pub const LAMBDA_GUARD: f64 = 1e-6;

impl CFBlockParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= LAMBDA_GUARD) {
            return Err(Error::DegenerateDenominator {
                op: "cf_template",
                value: self.lambda,
                guard: LAMBDA_GUARD,
            });
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!("cf sigma {} must be > 0", s)));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, h: usize, w: usize) -> f64 {
        self.sigma.unwrap_or(h.min(w) as f64 / 8.0)
    }
}

/// Centered 2-D Gaussian, peak 1 at ((h-1)/2, (w-1)/2) rounded down.
pub fn gaussian_label<S: Scalar>(h: usize, w: usize, sigma: f64) -> Tensor<S> {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            data.push(cast::<S>((-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    Tensor::new(vec![h, w], data).expect("label shape")
}

/// Separable Hann window; a length-1 axis degenerates to 1.
pub fn hann2d<S: Scalar>(h: usize, w: usize) -> Tensor<S> {
    let axis = |n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / (n - 1) as f64).cos()))
            .collect()
    };
    let (ay, ax) = (axis(h), axis(w));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(cast::<S>(ay[y] * ax[x]));
        }
    }
    Tensor::new(vec![h, w], data).expect("window shape")
}

/// Structural attention parameter nodes: 7x7 and 5x5 convolutions down,
/// 5x5 and 7x7 transposed convolutions back up, biases throughout.
pub struct StructAttentionNodes {
    pub conv7: (NodeId, NodeId),
    pub conv5: (NodeId, NodeId),
    pub deconv5: (NodeId, NodeId),
    pub deconv7: (NodeId, NodeId),
}

/// Gate a feature with a single-channel spatial weight map:
/// out = F * sigmoid(deconv7(deconv5(conv5(conv7(F))))).
pub fn structural_attention<S: Scalar>(
    g: &mut Graph<S>,
    f: NodeId,
    nodes: &StructAttentionNodes,
) -> Result<NodeId> {
    let sh = g.shape(f).to_vec();
    if sh.len() != 3 || sh[1] < 11 || sh[2] < 11 {
        return Err(Error::InputTooSmall {
            op: "structural_attention",
            detail: format!("need at least 11x11 spatial extent, got {:?}", sh),
        });
    }
    let c1 = g.conv2d(f, nodes.conv7.0, Some(nodes.conv7.1), 1, (0, 0))?;
    let c2 = g.conv2d(c1, nodes.conv5.0, Some(nodes.conv5.1), 1, (0, 0))?;
    let d1 = g.conv_transpose2d(c2, nodes.deconv5.0, Some(nodes.deconv5.1), 1)?;
    let d2 = g.conv_transpose2d(d1, nodes.deconv7.0, Some(nodes.deconv7.1), 1)?;
    let gate = g.sigmoid(d2);
    let gate2d = g.reshape(gate, &[sh[1], sh[2]])?;
    g.scale_broadcast(f, gate2d)
}

/// Semantic attention parameter nodes: the shared C -> C/r -> C stack.
pub struct SemAttentionNodes {
    pub fc1: (NodeId, NodeId),
    pub fc2: (NodeId, NodeId),
}

/// Gate a feature with channel weights from both global poolings:
/// out = F * sigmoid(mlp(gap(F)) + mlp(gmp(F))), shared mlp.
pub fn semantic_attention<S: Scalar>(
    g: &mut Graph<S>,
    f: NodeId,
    nodes: &SemAttentionNodes,
    ratio: usize,
) -> Result<NodeId> {
    let sh = g.shape(f).to_vec();
    let c = sh[0];
    if ratio == 0 || c % ratio != 0 {
        return Err(Error::InvalidConfig(format!(
            "channel count {} not divisible by reduction ratio {}",
            c, ratio
        )));
    }
    let mlp = |g: &mut Graph<S>, v: NodeId| -> Result<NodeId> {
        let v3 = g.reshape(v, &[c, 1, 1])?;
        let h = g.conv2d(v3, nodes.fc1.0, Some(nodes.fc1.1), 1, (0, 0))?;
        let h = g.relu(h);
        let o = g.conv2d(h, nodes.fc2.0, Some(nodes.fc2.1), 1, (0, 0))?;
        g.reshape(o, &[c])
    };
    let avg = g.global_avg_pool(f)?;
    let max = g.global_max_pool(f)?;
    let ma = mlp(g, avg)?;
    let mm = mlp(g, max)?;
    let sum = g.add(ma, mm)?;
    let gate = g.sigmoid(sum);
    g.scale_broadcast(f, gate)
}

/// Closed-form ridge template over the windowed exemplar feature.
///
/// With x_c the Hann-windowed channels, label spectrum Y, and per-bin
/// energy E = sum_c |X_c|^2, the template spectrum is
/// W_c = X_c * conj(Y) / (E + lambda), solved entirely through the
/// differentiable DFT ops. Output keeps the input's [C,h,w] shape.
pub fn cf_template<S: Scalar>(
    g: &mut Graph<S>,
    fz: NodeId,
    cf: &CFBlockParams,
) -> Result<NodeId> {
    cf.validate()?;
    let sh = g.shape(fz).to_vec();
    if sh.len() != 3 || sh[1] < 3 || sh[2] < 3 {
        return Err(Error::InputTooSmall {
            op: "cf_template",
            detail: format!("need [C,h,w] with h,w >= 3, got {:?}", sh),
        });
    }
    let (h, w) = (sh[1], sh[2]);
    let window = g.constant(hann2d::<S>(h, w));
    let windowed = g.scale_broadcast(fz, window)?;
    let spectrum = g.fft2(windowed)?;

    let label = gaussian_label::<S>(h, w, cf.sigma_for(h, w));
    let label_conj_spectrum = {
        let spec = crate::fft::fft2(&label)?;
        let conj = spec.conj();
        g.constant(Tensor::new(vec![h, w, 2], conj.data().to_vec())?)
    };

    let numerator = g.complex_mul(spectrum, label_conj_spectrum)?;
    let energy = g.complex_abs_sq(spectrum)?;
    let energy_sum = g.channel_sum(energy)?;
    let denom = g.add_const(energy_sum, cast::<S>(cf.lambda));
    let template_spectrum = g.complex_real_div(numerator, denom)?;
    g.ifft2_real(template_spectrum)
}
