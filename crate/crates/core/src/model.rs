//! The full matcher: shared backbone, two similarity heads, learned fusion.
//!
//! One [`Model`] owns the configuration and the parameter set. Forward
//! passes are built on a per-call [`Graph`], either trainable (leaves are
//! parameters) or frozen (leaves are constants), so training and tracking
//! share one code path for the network itself.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    check_alignment, extract_features, BackboneConfig, BackboneNodes, FeaturePair,
};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::graph::{Graph, NodeId};
use crate::params::{load_checkpoint, save_checkpoint, ParameterSet};
use crate::rng::SplitMix64;
use crate::scalar::{to_f64, Scalar};
use crate::similarity::{
    cf_template, semantic_attention, structural_attention, CFBlockParams, SemAttentionNodes,
    StructAttentionNodes,
};
use crate::tensor::{SimilarityMap, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Structural + semantic heads fused by the learned ensemble.
    Full,
    /// Semantic head only; its map is the final similarity.
    SemanticOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden channels of the structural conv/deconv sandwich.
    pub attention_mid_channels: usize,
    /// Channel reduction ratio of the semantic gate.
    pub semantic_ratio: usize,
    pub cf: CFBlockParams,
    pub head_mode: HeadMode,
    /// Apply the attention gates to the search branch as well
    /// (experimental; the reference composition gates the exemplar only).
    pub symmetric_attention: bool,
    pub exemplar_size: usize,
    pub search_size: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            attention_mid_channels: 32,
            semantic_ratio: 4,
            cf: CFBlockParams::default(),
            head_mode: HeadMode::Full,
            symmetric_attention: false,
            exemplar_size: 127,
            search_size: 255,
        }
    }

    /// Finite-difference scale: every block present, ~2k parameters.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            attention_mid_channels: 3,
            semantic_ratio: 2,
            cf: CFBlockParams::default(),
            head_mode: HeadMode::Full,
            symmetric_attention: false,
            exemplar_size: 31,
            search_size: 39,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cf.validate()?;
        let deep_c = self.backbone.channels_at(self.backbone.deep_tap);
        if self.semantic_ratio == 0 || deep_c % self.semantic_ratio != 0 {
            return Err(Error::InvalidConfig(format!(
                "deep channels {} not divisible by semantic ratio {}",
                deep_c, self.semantic_ratio
            )));
        }
        let z_shallow = self
            .backbone
            .tap_dim(self.exemplar_size, self.backbone.shallow_tap)
            .ok_or_else(|| Error::InputTooSmall {
                op: "model_config",
                detail: "exemplar too small for the backbone".into(),
            })?;
        if self.head_mode == HeadMode::Full && z_shallow < 11 {
            return Err(Error::InputTooSmall {
                op: "model_config",
                detail: format!(
                    "shallow exemplar feature {}x{} below the 11x11 attention minimum",
                    z_shallow, z_shallow
                ),
            });
        }
        self.map_shape()?;
        Ok(())
    }

    /// Aligned similarity-map shape for the configured crop sizes.
    pub fn map_shape(&self) -> Result<(usize, usize)> {
        check_alignment(&self.backbone, self.exemplar_size, self.search_size)
    }
}

/// Parameter nodes of one bound forward graph.
pub struct ModelNodes {
    pub backbone: BackboneNodes,
    pub structural: Option<StructAttentionNodes>,
    pub semantic: SemAttentionNodes,
    /// (alpha, beta, bias) scalar nodes when the fused head is active.
    pub fusion: Option<(NodeId, NodeId, NodeId)>,
    /// Name of every bound parameter alongside its node.
    pub named: Vec<(String, NodeId)>,
}

/// Exemplar-branch products cached by the tracker.
pub struct TemplateNodes {
    pub structural: Option<NodeId>,
    pub semantic: NodeId,
}

/// All maps produced for one (exemplar, search) pair.
pub struct PairOutputs {
    pub f_struct: Option<NodeId>,
    pub f_sem: NodeId,
    pub fused: NodeId,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParameterSet<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded Kaiming-style initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 0x90de1);
        let mut p = ParameterSet::new();
        let kaiming = |shape: &[usize], rng: &mut SplitMix64| {
            let fan_in: usize = shape[1..].iter().product();
            Tensor::<S>::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
        };
        let mut in_ch = config.backbone.in_channels;
        for (i, l) in config.backbone.layers.iter().enumerate() {
            p.insert(
                &format!("bb.conv{}.w", i + 1),
                kaiming(&[l.out_channels, in_ch, l.kernel, l.kernel], &mut rng),
            );
            p.insert(&format!("bb.conv{}.b", i + 1), Tensor::zeros(&[l.out_channels]));
            in_ch = l.out_channels;
        }
        let c3 = config.backbone.channels_at(config.backbone.shallow_tap);
        let rw = config.backbone.reduce_width;
        p.insert("bb.reduce.w", kaiming(&[rw, c3, 1, 1], &mut rng));
        p.insert("bb.reduce.b", Tensor::zeros(&[rw]));

        if config.head_mode == HeadMode::Full {
            let mid = config.attention_mid_channels;
            p.insert("satt.conv7.w", kaiming(&[mid, rw, 7, 7], &mut rng));
            p.insert("satt.conv7.b", Tensor::zeros(&[mid]));
            p.insert("satt.conv5.w", kaiming(&[mid, mid, 5, 5], &mut rng));
            p.insert("satt.conv5.b", Tensor::zeros(&[mid]));
            p.insert("satt.deconv5.w", kaiming(&[mid, mid, 5, 5], &mut rng));
            p.insert("satt.deconv5.b", Tensor::zeros(&[mid]));
            p.insert("satt.deconv7.w", kaiming(&[mid, 1, 7, 7], &mut rng));
            p.insert("satt.deconv7.b", Tensor::zeros(&[1]));
        }

        let cd = config.backbone.channels_at(config.backbone.deep_tap);
        let hid = cd / config.semantic_ratio;
        p.insert("catt.fc1.w", kaiming(&[hid, cd, 1, 1], &mut rng));
        p.insert("catt.fc1.b", Tensor::zeros(&[hid]));
        p.insert("catt.fc2.w", kaiming(&[cd, hid, 1, 1], &mut rng));
        p.insert("catt.fc2.b", Tensor::zeros(&[cd]));

        if config.head_mode == HeadMode::Full {
            // Unweighted start: the fused map equals the KL-optimal mean.
            p.insert("ren.alpha", Tensor::scalar(S::one()));
            p.insert("ren.beta", Tensor::scalar(S::one()));
            p.insert("ren.bias", Tensor::scalar(S::zero()));
        }

        Ok(Self { config, params: p })
    }

    /// Insert every parameter into `g`; `trainable` decides whether the
    /// leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> ModelNodes {
        let mut named = Vec::with_capacity(self.params.len());
        let mut leaf = |g: &mut Graph<S>, name: &str| -> NodeId {
            let t = self
                .params
                .get(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
                .clone();
            let id = if trainable { g.param(t) } else { g.constant(t) };
            named.push((name.to_string(), id));
            id
        };
        let mut layers = Vec::new();
        for i in 1..=self.config.backbone.layers.len() {
            layers.push((
                leaf(g, &format!("bb.conv{}.w", i)),
                leaf(g, &format!("bb.conv{}.b", i)),
            ));
        }
        let backbone = BackboneNodes {
            layers,
            reduce: (leaf(g, "bb.reduce.w"), leaf(g, "bb.reduce.b")),
        };
        let structural = (self.config.head_mode == HeadMode::Full).then(|| StructAttentionNodes {
            conv7: (leaf(g, "satt.conv7.w"), leaf(g, "satt.conv7.b")),
            conv5: (leaf(g, "satt.conv5.w"), leaf(g, "satt.conv5.b")),
            deconv5: (leaf(g, "satt.deconv5.w"), leaf(g, "satt.deconv5.b")),
            deconv7: (leaf(g, "satt.deconv7.w"), leaf(g, "satt.deconv7.b")),
        });
        let semantic = SemAttentionNodes {
            fc1: (leaf(g, "catt.fc1.w"), leaf(g, "catt.fc1.b")),
            fc2: (leaf(g, "catt.fc2.w"), leaf(g, "catt.fc2.b")),
        };
        let fusion = (self.config.head_mode == HeadMode::Full).then(|| {
            (
                leaf(g, "ren.alpha"),
                leaf(g, "ren.beta"),
                leaf(g, "ren.bias"),
            )
        });
        ModelNodes {
            backbone,
            structural,
            semantic,
            fusion,
            named,
        }
    }

    /// Exemplar branch: tap features, attention gates, filter templates.
    pub fn exemplar_templates(
        &self,
        g: &mut Graph<S>,
        nodes: &ModelNodes,
        z_image: NodeId,
    ) -> Result<TemplateNodes> {
        let feats = extract_features(g, &self.config.backbone, &nodes.backbone, z_image)?;
        let structural = match (&nodes.structural, self.config.head_mode) {
            (Some(satt), HeadMode::Full) => {
                let gated = structural_attention(g, feats.shallow, satt)?;
                Some(cf_template(g, gated, &self.config.cf)?)
            }
            _ => None,
        };
        let gated_deep = semantic_attention(g, feats.deep, &nodes.semantic, self.config.semantic_ratio)?;
        let semantic = cf_template(g, gated_deep, &self.config.cf)?;
        Ok(TemplateNodes {
            structural,
            semantic,
        })
    }

    /// Search branch: raw tap features (gated only in the symmetric
    /// experiment).
    pub fn search_features(
        &self,
        g: &mut Graph<S>,
        nodes: &ModelNodes,
        x_image: NodeId,
    ) -> Result<FeaturePair> {
        let feats = extract_features(g, &self.config.backbone, &nodes.backbone, x_image)?;
        if !self.config.symmetric_attention {
            return Ok(feats);
        }
        let shallow = match &nodes.structural {
            Some(satt) => structural_attention(g, feats.shallow, satt)?,
            None => feats.shallow,
        };
        let deep = semantic_attention(g, feats.deep, &nodes.semantic, self.config.semantic_ratio)?;
        Ok(FeaturePair { shallow, deep })
    }

    /// Correlate cached templates against search features and fuse.
    pub fn response(
        &self,
        g: &mut Graph<S>,
        nodes: &ModelNodes,
        templates: &TemplateNodes,
        search: &FeaturePair,
    ) -> Result<PairOutputs> {
        let f_sem = g.cross_correlate(templates.semantic, search.deep)?;
        let f_struct = match templates.structural {
            Some(t) => Some(g.cross_correlate(t, search.shallow)?),
            None => None,
        };
        let fused = match (f_struct, nodes.fusion) {
            (Some(fs), Some((alpha, beta, bias))) => {
                let a = g.scalar_mul(fs, alpha)?;
                let b = g.scalar_mul(f_sem, beta)?;
                let sum = g.add(a, b)?;
                let half = g.mul_const(sum, crate::scalar::cast::<S>(0.5));
                g.scalar_add(half, bias)?
            }
            _ => f_sem,
        };
        Ok(PairOutputs {
            f_struct,
            f_sem,
            fused,
        })
    }

    /// Full forward for one (exemplar, search) pair.
    pub fn forward_pair(
        &self,
        g: &mut Graph<S>,
        nodes: &ModelNodes,
        z_image: NodeId,
        x_image: NodeId,
    ) -> Result<PairOutputs> {
        let templates = self.exemplar_templates(g, nodes, z_image)?;
        let search = self.search_features(g, nodes, x_image)?;
        self.response(g, nodes, &templates, &search)
    }

    /// Structural similarity map for raw image crops.
    pub fn struct_similarity(
        &self,
        z_image: &Tensor<S>,
        x_image: &Tensor<S>,
    ) -> Result<SimilarityMap<S>> {
        if self.config.head_mode != HeadMode::Full {
            return Err(Error::InvalidConfig(
                "structural head absent in semantic-only mode".into(),
            ));
        }
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let z = g.constant(z_image.clone());
        let x = g.constant(x_image.clone());
        let out = self.forward_pair(&mut g, &nodes, z, x)?;
        Ok(g.value(out.f_struct.expect("full mode")).clone())
    }

    /// Semantic similarity map for raw image crops.
    pub fn semantic_similarity(
        &self,
        z_image: &Tensor<S>,
        x_image: &Tensor<S>,
    ) -> Result<SimilarityMap<S>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let z = g.constant(z_image.clone());
        let x = g.constant(x_image.clone());
        let out = self.forward_pair(&mut g, &nodes, z, x)?;
        Ok(g.value(out.f_sem).clone())
    }

    /// Fused similarity map for raw image crops.
    pub fn fused_similarity(
        &self,
        z_image: &Tensor<S>,
        x_image: &Tensor<S>,
    ) -> Result<SimilarityMap<S>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let z = g.constant(z_image.clone());
        let x = g.constant(x_image.clone());
        let out = self.forward_pair(&mut g, &nodes, z, x)?;
        Ok(g.value(out.fused).clone())
    }

    /// Scalar fusion weights currently held in the parameter set.
    pub fn fusion_params(&self) -> FusionParams {
        match (
            self.params.get("ren.alpha"),
            self.params.get("ren.beta"),
            self.params.get("ren.bias"),
        ) {
            (Some(a), Some(b), Some(c)) => FusionParams {
                alpha: to_f64(a.data()[0]),
                beta: to_f64(b.data()[0]),
                bias: to_f64(c.data()[0]),
            },
            _ => FusionParams {
                alpha: 0.0,
                beta: 1.0,
                bias: 0.0,
            },
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "model_config": self.config,
            "info": extra,
        });
        save_checkpoint(&self.params, path, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint::<S>(path)?;
        let config: ModelConfig =
            serde_json::from_value(meta["model_config"].clone()).map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                detail: format!("missing or invalid model_config: {e}"),
            })?;
        config.validate()?;
        Ok(Self { config, params })
    }
}
