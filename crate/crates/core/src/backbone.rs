//! Shared Siamese feature extractor.
//!
//! A small AlexNet-like stack of conv+ReLU layers with one optional 2x2
//! max-pool, exposing a shallow tap (whose channels are reduced by a 1x1
//! convolution before the structural head) and a deep tap. One parameter
//! set serves both the exemplar and the search branch.

use serde::{Deserialize, Serialize};

use crate::conv::conv_out_dim;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// 2x2 stride-2 max-pool inserted after this 1-based layer, if any.
    pub pool_after: Option<usize>,
    /// 1-based layer whose output feeds the structural head (via reduction).
    pub shallow_tap: usize,
    /// 1-based layer whose output feeds the semantic head.
    pub deep_tap: usize,
    /// Channel count of the reduced shallow feature.
    pub reduce_width: usize,
}

impl BackboneConfig {
    /// Desk-scale default: five conv layers, taps at layers 3 and 5,
    /// padding (1,1) on the last two layers so the two similarity maps
    /// align, shallow channels reduced to 64.
    pub fn desk() -> Self {
        let mk = |out_channels, kernel, stride, pad| ConvLayerSpec {
            out_channels,
            kernel,
            stride,
            pad,
        };
        Self {
            in_channels: 1,
            layers: vec![
                mk(16, 7, 2, 0),
                mk(32, 5, 2, 0),
                mk(32, 3, 1, 0),
                mk(32, 3, 1, 1),
                mk(48, 3, 1, 1),
            ],
            pool_after: Some(1),
            shallow_tap: 3,
            deep_tap: 5,
            reduce_width: 64,
        }
    }

    /// Miniature configuration for finite-difference checks: same wiring,
    /// two orders of magnitude fewer parameters.
    pub fn tiny() -> Self {
        let mk = |out_channels, kernel, stride, pad| ConvLayerSpec {
            out_channels,
            kernel,
            stride,
            pad,
        };
        Self {
            in_channels: 1,
            layers: vec![
                mk(2, 7, 1, 0),
                mk(3, 5, 1, 0),
                mk(4, 3, 1, 0),
                mk(4, 3, 1, 1),
                mk(4, 3, 1, 1),
            ],
            pool_after: None,
            shallow_tap: 3,
            deep_tap: 5,
            reduce_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::InvalidConfig("backbone has no layers".into()));
        }
        if self.shallow_tap == 0 || self.shallow_tap > n || self.deep_tap == 0 || self.deep_tap > n
        {
            return Err(Error::InvalidConfig(format!(
                "taps ({}, {}) out of range 1..={}",
                self.shallow_tap, self.deep_tap, n
            )));
        }
        if self.shallow_tap > self.deep_tap {
            return Err(Error::InvalidConfig(
                "shallow tap must not lie above the deep tap".into(),
            ));
        }
        if let Some(p) = self.pool_after {
            if p == 0 || p > n {
                return Err(Error::InvalidConfig(format!("pool_after {} out of range", p)));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, tap: usize) -> usize {
        self.layers[tap - 1].out_channels
    }

    /// Spatial extent of the layer-`tap` feature map for a square input,
    /// or None when some layer underflows.
    pub fn tap_dim(&self, input: usize, tap: usize) -> Option<usize> {
        let mut d = input;
        for (i, l) in self.layers.iter().take(tap).enumerate() {
            d = conv_out_dim(d, l.kernel, l.stride, l.pad)?;
            if self.pool_after == Some(i + 1) {
                if d < 2 {
                    return None;
                }
                d /= 2;
            }
        }
        Some(d)
    }
}

/// Spatial shape shared by the two similarity maps, or a report naming the
/// first mismatching dimension.
pub fn check_alignment(
    cfg: &BackboneConfig,
    exemplar: usize,
    search: usize,
) -> Result<(usize, usize)> {
    cfg.validate()?;
    let dims = |tap: usize| -> Result<(usize, usize)> {
        let z = cfg.tap_dim(exemplar, tap).ok_or_else(|| Error::InputTooSmall {
            op: "check_alignment",
            detail: format!("exemplar {} underflows at tap {}", exemplar, tap),
        })?;
        let x = cfg.tap_dim(search, tap).ok_or_else(|| Error::InputTooSmall {
            op: "check_alignment",
            detail: format!("search {} underflows at tap {}", search, tap),
        })?;
        if z > x {
            return Err(Error::InputTooSmall {
                op: "check_alignment",
                detail: format!("exemplar features {} exceed search features {}", z, x),
            });
        }
        Ok((x - z + 1, x - z + 1))
    };
    let shallow = dims(cfg.shallow_tap)?;
    let deep = dims(cfg.deep_tap)?;
    if shallow != deep {
        return Err(Error::Misaligned(format!(
            "structural map {}x{} vs semantic map {}x{} (first mismatch: rows {} != {})",
            shallow.0, shallow.1, deep.0, deep.1, shallow.0, deep.0
        )));
    }
    Ok(shallow)
}

/// Cumulative input-pixel stride at the given tap.
pub fn total_stride(cfg: &BackboneConfig, tap: usize) -> usize {
    let mut s = 1;
    for (i, l) in cfg.layers.iter().take(tap).enumerate() {
        s *= l.stride;
        if cfg.pool_after == Some(i + 1) {
            s *= 2;
        }
    }
    s
}

/// Per-layer parameter nodes bound into a graph.
pub struct BackboneNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub reduce: (NodeId, NodeId),
}

/// Raw tap features of one branch.
pub struct FeaturePair {
    /// Reduced shallow feature, `reduce_width` channels.
    pub shallow: NodeId,
    /// Deep tap feature.
    pub deep: NodeId,
}

/// Run the backbone over `input` ([1,H,W] in [0,1]) and return both taps.
/// The shallow tap is channel-reduced by the 1x1 projection.
pub fn extract_features<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    nodes: &BackboneNodes,
    input: NodeId,
) -> Result<FeaturePair> {
    cfg.validate()?;
    let mut cur = input;
    let mut shallow_raw = None;
    let mut deep = None;
    for (i, _) in cfg.layers.iter().enumerate() {
        let (w, b) = nodes.layers[i];
        let l = &cfg.layers[i];
        let conv = g
            .conv2d(cur, w, Some(b), l.stride, (l.pad, l.pad))
            .map_err(|e| match e {
                Error::ShapeMismatch { detail, .. } => Error::InputTooSmall {
                    op: "extract_features",
                    detail: format!("layer {}: {}", i + 1, detail),
                },
                other => other,
            })?;
        cur = g.relu(conv);
        if cfg.pool_after == Some(i + 1) {
            cur = g.max_pool2(cur)?;
        }
        if i + 1 == cfg.shallow_tap {
            shallow_raw = Some(cur);
        }
        if i + 1 == cfg.deep_tap {
            deep = Some(cur);
        }
    }
    let shallow = reduce_conv3(g, nodes, shallow_raw.expect("validated tap"))?;
    Ok(FeaturePair {
        shallow,
        deep: deep.expect("validated tap"),
    })
}

/// 1x1 projection of the shallow tap to `reduce_width` channels;
/// spatial dims are preserved.
pub fn reduce_conv3<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &BackboneNodes,
    shallow_raw: NodeId,
) -> Result<NodeId> {
    let (w, b) = nodes.reduce;
    g.conv2d(shallow_raw, w, Some(b), 1, (0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    fn bind_random(g: &mut Graph<f64>, cfg: &BackboneConfig, rng: &mut SplitMix64) -> BackboneNodes {
        let mut layers = Vec::new();
        let mut in_ch = cfg.in_channels;
        for l in &cfg.layers {
            let w = g.param(Tensor::randn(
                &[l.out_channels, in_ch, l.kernel, l.kernel],
                (2.0 / (in_ch * l.kernel * l.kernel) as f64).sqrt(),
                rng,
            ));
            let b = g.param(Tensor::randn(&[l.out_channels], 0.05, rng));
            layers.push((w, b));
            in_ch = l.out_channels;
        }
        let c3 = cfg.channels_at(cfg.shallow_tap);
        let reduce = (
            g.param(Tensor::randn(&[cfg.reduce_width, c3, 1, 1], 0.2, rng)),
            g.param(Tensor::randn(&[cfg.reduce_width], 0.05, rng)),
        );
        BackboneNodes { layers, reduce }
    }

    #[test]
    fn desk_config_aligns_and_matches_bookkeeping() {
        let cfg = BackboneConfig::desk();
        // 127 -> 61 -> pool 30 -> 13 -> 11 -> 11 -> 11
        assert_eq!(cfg.tap_dim(127, 3), Some(11));
        assert_eq!(cfg.tap_dim(127, 5), Some(11));
        // 255 -> 125 -> pool 62 -> 29 -> 27 -> 27 -> 27
        assert_eq!(cfg.tap_dim(255, 3), Some(27));
        assert_eq!(cfg.tap_dim(255, 5), Some(27));
        assert_eq!(check_alignment(&cfg, 127, 255).unwrap(), (17, 17));
        assert_eq!(total_stride(&cfg, 3), 8);
    }

    #[test]
    fn doubled_deep_stride_reports_misalignment() {
        let mut cfg = BackboneConfig::desk();
        cfg.layers[4].stride = 2;
        match check_alignment(&cfg, 127, 255) {
            Err(Error::Misaligned(msg)) => assert!(msg.contains("mismatch"), "{msg}"),
            other => panic!("expected misalignment, got {other:?}"),
        }
    }

    #[test]
    fn equal_crop_sizes_always_align() {
        let cfg = BackboneConfig::desk();
        assert_eq!(check_alignment(&cfg, 255, 255).unwrap(), (1, 1));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig::tiny();
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(3);
        let mut nodes = bind_random(&mut g, &cfg, &mut rng);
        // Zero out all biases.
        for (_, b) in nodes.layers.iter_mut() {
            *b = g.constant(Tensor::zeros(g.shape(*b)));
        }
        nodes.reduce.1 = g.constant(Tensor::zeros(g.shape(nodes.reduce.1)));
        let img = g.constant(Tensor::zeros(&[1, 31, 31]));
        let fp = extract_features(&mut g, &cfg, &nodes, img).unwrap();
        assert!(g.value(fp.shallow).data().iter().all(|&v| v == 0.0));
        assert!(g.value(fp.deep).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branches_share_weights() {
        let cfg = BackboneConfig::tiny();
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(5);
        let nodes = bind_random(&mut g, &cfg, &mut rng);
        let img = g.constant(Tensor::randn(&[1, 31, 31], 1.0, &mut rng));
        let a = extract_features(&mut g, &cfg, &nodes, img).unwrap();
        let b = extract_features(&mut g, &cfg, &nodes, img).unwrap();
        assert_eq!(g.value(a.shallow), g.value(b.shallow));
        assert_eq!(g.value(a.deep), g.value(b.deep));
    }

    #[test]
    fn layer1_preactivation_homogeneous_with_zero_bias() {
        let cfg = BackboneConfig::tiny();
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(7);
        let w = g.param(Tensor::randn(&[2, 1, 7, 7], 0.2, &mut rng));
        let img_t = Tensor::randn(&[1, 20, 20], 1.0, &mut rng);
        let scaled_t = img_t.scale(3.0);
        let img = g.constant(img_t);
        let scaled = g.constant(scaled_t);
        let l = &cfg.layers[0];
        let y1 = g.conv2d(img, w, None, l.stride, (l.pad, l.pad)).unwrap();
        let y3 = g.conv2d(scaled, w, None, l.stride, (l.pad, l.pad)).unwrap();
        let y1v = g.value(y1).data();
        let y3v = g.value(y3).data();
        for (a, b) in y1v.iter().zip(y3v) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn too_small_input_errors() {
        let cfg = BackboneConfig::desk();
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(9);
        let nodes = bind_random(&mut g, &cfg, &mut rng);
        let img = g.constant(Tensor::zeros(&[1, 6, 6]));
        assert!(matches!(
            extract_features(&mut g, &cfg, &nodes, img),
            Err(Error::InputTooSmall { .. })
        ));
    }

    #[test]
    fn reduce_identity_kernels_pass_through() {
        // Identity 1x1 kernels on matching width: output equals input.
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(11);
        let c = 4;
        let mut kern = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            kern.data_mut()[i * c + i] = 1.0;
        }
        let w = g.constant(kern);
        let b = g.constant(Tensor::zeros(&[c]));
        let x = g.constant(Tensor::randn(&[c, 5, 5], 1.0, &mut rng));
        let nodes = BackboneNodes {
            layers: vec![],
            reduce: (w, b),
        };
        let y = reduce_conv3(&mut g, &nodes, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn reduce_matches_per_pixel_matrix_product() {
        let mut g = Graph::<f64>::new();
        let mut rng = SplitMix64::new(13);
        let (cin, cout, h, w) = (5, 3, 4, 4);
        let kern = Tensor::<f64>::randn(&[cout, cin, 1, 1], 0.5, &mut rng);
        let bias = Tensor::<f64>::randn(&[cout], 0.5, &mut rng);
        let x = Tensor::<f64>::randn(&[cin, h, w], 1.0, &mut rng);
        let wk = g.constant(kern.clone());
        let bk = g.constant(bias.clone());
        let xk = g.constant(x.clone());
        let nodes = BackboneNodes {
            layers: vec![],
            reduce: (wk, bk),
        };
        let y = reduce_conv3(&mut g, &nodes, xk).unwrap();
        // Dense matrix-multiply oracle, per pixel.
        for i in 0..h * w {
            for o in 0..cout {
                let mut acc = bias.data()[o];
                for c in 0..cin {
                    acc += kern.data()[o * cin + c] * x.data()[c * h * w + i];
                }
                let got = g.value(y).data()[o * h * w + i];
                assert!((got - acc).abs() < 1e-5);
            }
        }
    }
}
