//! Pair sampling, label maps, the logistic mean loss, and the SGD loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParameterSet;
use crate::resample::crop_to_tensor;
use crate::rng::SplitMix64;
use crate::scalar::{cast, to_f64, Scalar};
use crate::sequence::{AnnotatedSequence, BoundingBox};
use crate::tensor::{SimilarityMap, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Positive label radius in score-map cells.
    pub positive_radius: f64,
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Context margin factor on (w + h) around the annotated box.
    pub context_margin: f64,
    /// Largest |i - j| between the two frames of a pair.
    pub max_frame_gap: usize,
    /// Pairs drawn from each sequence per epoch.
    pub pairs_per_sequence: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_start: 1e-2,
            lr_end: 1e-5,
            positive_radius: 2.0,
            exemplar_size: 127,
            search_size: 255,
            context_margin: 0.5,
            max_frame_gap: 10,
            pairs_per_sequence: 1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 || self.pairs_per_sequence == 0 {
            return Err(Error::InvalidConfig("batch and pair counts must be positive".into()));
        }
        if self.positive_radius < 0.5 {
            return Err(Error::InvalidConfig("positive radius below half a cell".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Score-map ground truth: labels in {-1,+1} with class-balanced weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap<S: Scalar> {
    pub labels: Tensor<S>,
    pub weights: Tensor<S>,
}

/// +1 within Euclidean radius `r` of the map center, -1 elsewhere;
/// the positive and negative classes each carry half the total weight.
pub fn make_label_map<S: Scalar>(shape: (usize, usize), r: f64) -> Result<LabelMap<S>> {
    let (m, n) = shape;
    if r < 0.0 {
        return Err(Error::InvalidConfig("negative radius".into()));
    }
    let (cy, cx) = ((m / 2) as f64, (n / 2) as f64);
    let mut labels = Vec::with_capacity(m * n);
    let mut pos = 0usize;
    for y in 0..m {
        for x in 0..n {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= r {
                labels.push(1.0);
                pos += 1;
            } else {
                labels.push(-1.0);
            }
        }
    }
    let neg = m * n - pos;
    if pos == 0 {
        return Err(Error::InvalidConfig("radius excludes the center cell".into()));
    }
    if neg == 0 {
        return Err(Error::InvalidConfig(format!(
            "radius {} covers the whole {}x{} map; no negatives remain",
            r, m, n
        )));
    }
    let wp = 0.5 / pos as f64;
    let wn = 0.5 / neg as f64;
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| if l > 0.0 { wp } else { wn })
        .collect();
    Ok(LabelMap {
        labels: Tensor::from_f64(&[m, n], &labels)?,
        weights: Tensor::from_f64(&[m, n], &weights)?,
    })
}

/// One training example: exemplar crop, search crop, score-map labels.
pub struct SamplePair<S: Scalar> {
    pub exemplar: Tensor<S>,
    pub search: Tensor<S>,
    pub label: LabelMap<S>,
}

/// Square crop side with context margin folded in.
pub fn context_side(b: &BoundingBox, margin: f64) -> f64 {
    let ctx = margin * (b.w + b.h);
    ((b.w + ctx) * (b.h + ctx)).sqrt().max(4.0)
}

/// Draw a same-identity pair: exemplar around frame i's box, search
/// around frame j's box, |i-j| bounded by the frame gap. The target is
/// centered in both crops, so the label peak sits at the map center.
pub fn generate_pair<S: Scalar>(
    seq: &AnnotatedSequence,
    cfg: &TrainConfig,
    map_shape: (usize, usize),
    rng: &mut SplitMix64,
) -> Result<SamplePair<S>> {
    if seq.len() < 2 {
        return Err(Error::InsufficientFrames(format!(
            "{} has {} frames",
            seq.name,
            seq.len()
        )));
    }
    let i = rng.below(seq.len());
    let lo = i.saturating_sub(cfg.max_frame_gap);
    let hi = (i + cfg.max_frame_gap).min(seq.len() - 1);
    let mut j = lo + rng.below(hi - lo + 1);
    if j == i {
        // A same-frame pair is legal but trains nothing; nudge when possible.
        j = if i + 1 <= hi { i + 1 } else { i.saturating_sub(1).max(lo) };
    }

    let bz = &seq.boxes[i];
    let bx = &seq.boxes[j];
    let side_z = context_side(bz, cfg.context_margin);
    let side_x = context_side(bx, cfg.context_margin) * cfg.search_size as f64
        / cfg.exemplar_size as f64;
    let exemplar = crop_to_tensor::<S>(&seq.frames[i], bz.center(), side_z, cfg.exemplar_size);
    let search = crop_to_tensor::<S>(&seq.frames[j], bx.center(), side_x, cfg.search_size);
    Ok(SamplePair {
        exemplar,
        search,
        label: make_label_map(map_shape, cfg.positive_radius)?,
    })
}

/// Stabilized weighted logistic loss (pure-tensor form of the graph op):
/// sum_u w[u] * (max(-y*o, 0) + ln(1 + exp(-|y*o|))).
pub fn logistic_loss<S: Scalar>(label: &LabelMap<S>, scores: &SimilarityMap<S>) -> Result<f64> {
    if label.labels.shape() != scores.shape() {
        return Err(Error::ShapeMismatch {
            op: "logistic_loss",
            detail: format!("{:?} vs {:?}", label.labels.shape(), scores.shape()),
        });
    }
    let mut acc = 0.0f64;
    for i in 0..scores.numel() {
        let yo = to_f64(label.labels.data()[i]) * to_f64(scores.data()[i]);
        acc += to_f64(label.weights.data()[i]) * ((-yo).max(0.0) + (-yo.abs()).exp().ln_1p());
    }
    Ok(acc)
}

/// Geometric interpolation from lr_start (epoch 0) to lr_end (last epoch).
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(epoch < cfg.epochs);
    if cfg.epochs == 1 {
        return cfg.lr_start;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// Momentum-SGD with decoupled-from-nothing classic weight decay:
/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
pub fn sgd_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &ParameterSet<S>,
    velocity: &mut ParameterSet<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr_s = cast::<S>(lr);
    let mom = cast::<S>(momentum);
    let wd = cast::<S>(weight_decay);
    let names = params.names();
    for name in names {
        let g = match grads.get(&name) {
            Some(g) => g.clone(),
            None => continue,
        };
        if velocity.get(&name).is_none() {
            velocity.insert(&name, Tensor::zeros(g.shape()));
        }
        let v = velocity.get_mut(&name).expect("velocity slot");
        let p = params.get(&name).expect("param").clone();
        for ((vi, &gi), &pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data()) {
            *vi = mom * *vi + gi + wd * pi;
        }
        let v_now = v.clone();
        let p_mut = params.get_mut(&name).expect("param");
        for (pi, &vi) in p_mut.data_mut().iter_mut().zip(v_now.data()) {
            *pi -= lr_s * vi;
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub history: Vec<EpochStats>,
}

/// Train in place over the dataset. When `out_dir` is given, a checkpoint
/// `epoch_XXX.json` is written per epoch along with `loss_history.csv`
/// (columns epoch, mean_loss, lr) and the final model as `model.json`.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    dataset: &[AnnotatedSequence],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientFrames("empty dataset".into()));
    }
    let map_shape = model.config.map_shape()?;
    let mut rng = SplitMix64::derive(cfg.seed, 0x7ea1);
    let mut velocity = ParameterSet::<S>::new();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        // Fixed visiting order, reshuffled deterministically per epoch.
        let mut order: Vec<usize> = (0..dataset.len())
            .flat_map(|s| std::iter::repeat(s).take(cfg.pairs_per_sequence))
            .collect();
        for k in (1..order.len()).rev() {
            order.swap(k, rng.below(k + 1));
        }

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_grads = ParameterSet::<S>::new();
            let mut batch_loss = 0.0f64;
            for &seq_idx in chunk {
                let pair = generate_pair::<S>(&dataset[seq_idx], cfg, map_shape, &mut rng)?;
                let mut g = Graph::new();
                let nodes = model.bind(&mut g, true);
                let z = g.constant(pair.exemplar);
                let x = g.constant(pair.search);
                let out = model.forward_pair(&mut g, &nodes, z, x)?;
                let loss = g.logistic_loss(out.fused, &pair.label.labels, &pair.label.weights)?;
                g.backward(loss)?;
                batch_loss += to_f64(g.value(loss).data()[0]);
                for (name, id) in &nodes.named {
                    let grad = g.grad(*id).expect("trainable leaf").clone();
                    match batch_grads.get_mut(name) {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                        None => batch_grads.insert(name, grad),
                    }
                }
            }
            let inv = cast::<S>(1.0 / chunk.len() as f64);
            let mut mean_grads = ParameterSet::<S>::new();
            for (name, g) in batch_grads.iter() {
                mean_grads.insert(name, g.scale(inv));
            }
            sgd_step(
                &mut model.params,
                &mean_grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            epoch_loss += batch_loss;
            seen += chunk.len();
        }

        let stats = EpochStats {
            epoch,
            mean_loss: epoch_loss / seen as f64,
            lr,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            model.save(
                &dir.join(format!("epoch_{:03}.json", epoch)),
                serde_json::json!({"epoch": epoch, "mean_loss": stats.mean_loss}),
            )?;
        }
        history.push(stats);
    }

    if let Some(dir) = out_dir {
        let mut csv = String::from("epoch,mean_loss,lr\n");
        for s in &history {
            csv.push_str(&format!("{},{:.10},{:.10e}\n", s.epoch, s.mean_loss, s.lr));
        }
        std::fs::write(dir.join("loss_history.csv"), csv)?;
        model.save(
            &dir.join("model.json"),
            serde_json::json!({"epochs": cfg.epochs, "final": true}),
        )?;
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_sequence, SceneConfig};

    #[test]
    fn label_counts_and_balance() {
        let lm = make_label_map::<f64>((17, 17), 2.0).unwrap();
        let pos = lm.labels.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(pos, 13); // cells with Euclidean distance <= 2
        let wpos: f64 = lm
            .labels
            .data()
            .iter()
            .zip(lm.weights.data())
            .filter(|(&l, _)| l > 0.0)
            .map(|(_, &w)| w)
            .sum();
        assert!((wpos - 0.5).abs() < 1e-12);
        let total: f64 = lm.weights.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_radius_gives_single_positive() {
        let lm = make_label_map::<f64>((9, 9), 0.5).unwrap();
        let pos = lm.labels.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(pos, 1);
    }

    #[test]
    fn oversized_radius_rejected() {
        assert!(make_label_map::<f64>((5, 5), 10.0).is_err());
    }

    #[test]
    fn loss_at_zero_scores_is_ln2() {
        let lm = make_label_map::<f64>((9, 9), 1.0).unwrap();
        let o = Tensor::zeros(&[9, 9]);
        let l = logistic_loss(&lm, &o).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn stabilized_matches_naive_where_naive_is_safe() {
        let mut rng = SplitMix64::new(2);
        let lm = make_label_map::<f64>((5, 5), 1.0).unwrap();
        let o = Tensor::<f64>::randn(&[5, 5], 5.0, &mut rng);
        let stable = logistic_loss(&lm, &o).unwrap();
        let naive: f64 = (0..25)
            .map(|i| {
                let yo = lm.labels.data()[i] * o.data()[i];
                lm.weights.data()[i] * (1.0 + (-yo).exp()).ln()
            })
            .sum();
        assert!((stable - naive).abs() < 1e-10);
        // And stays finite where naive would overflow.
        let extreme = Tensor::<f64>::filled(&[5, 5], -800.0);
        assert!(logistic_loss(&lm, &extreme).unwrap().is_finite());
    }

    #[test]
    fn lr_schedule_endpoints_and_geometry() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &cfg), 1e-2);
        assert!((lr_at_epoch(49, &cfg) - 1e-5).abs() < 1e-18);
        // Strictly decreasing with a constant ratio.
        let ratio = lr_at_epoch(1, &cfg) / lr_at_epoch(0, &cfg);
        for e in 1..cfg.epochs {
            let r = lr_at_epoch(e, &cfg) / lr_at_epoch(e - 1, &cfg);
            assert!(r < 1.0);
            assert!((r - ratio).abs() < 1e-12);
        }
        // Geometric midpoint: exponent 1/2 lands on 10^-3.5.
        let mid = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!((lr_at_epoch(1, &mid) - 10f64.powf(-3.5)).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_scalar_recurrence() {
        // Two steps on f(p) = p^2/2 (grad = p) against a hand recurrence.
        let mut params = ParameterSet::<f64>::new();
        params.insert("p", Tensor::scalar(1.0));
        let mut velocity = ParameterSet::<f64>::new();
        let (lr, mom, wd) = (0.1, 0.9, 0.01);
        let mut p_hand = 1.0f64;
        let mut v_hand = 0.0f64;
        for _ in 0..2 {
            let mut grads = ParameterSet::<f64>::new();
            grads.insert("p", Tensor::scalar(p_hand));
            sgd_step(&mut params, &grads, &mut velocity, lr, mom, wd);
            v_hand = mom * v_hand + p_hand + wd * p_hand;
            p_hand -= lr * v_hand;
            assert!((params.get("p").unwrap().data()[0] - p_hand).abs() < 1e-10);
        }
    }

    #[test]
    fn momentum_free_step_is_plain_descent() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("p", Tensor::scalar(2.0));
        let mut velocity = ParameterSet::<f64>::new();
        let mut grads = ParameterSet::<f64>::new();
        grads.insert("p", Tensor::scalar(0.5));
        sgd_step(&mut params, &grads, &mut velocity, 0.2, 0.0, 0.0);
        assert!((params.get("p").unwrap().data()[0] - 1.9).abs() < 1e-12);
        // Zero gradient, zero decay: parameters unchanged.
        let mut zg = ParameterSet::<f64>::new();
        zg.insert("p", Tensor::scalar(0.0));
        sgd_step(&mut params, &zg, &mut velocity, 0.2, 0.0, 0.0);
        assert!((params.get("p").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }

    fn mini_dataset(frames: usize) -> Vec<AnnotatedSequence> {
        let mut cfg = SceneConfig {
            frames,
            width: 120,
            height: 100,
            ..SceneConfig::default()
        };
        cfg.sprite.width = 18.0;
        cfg.sprite.height = 16.0;
        (0..2)
            .map(|k| generate_sequence(&cfg, 100 + k).unwrap())
            .collect()
    }

    fn mini_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            pairs_per_sequence: 1,
            exemplar_size: 31,
            search_size: 39,
            max_frame_gap: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pair_geometry_and_determinism() {
        let data = mini_dataset(6);
        let cfg = mini_train_cfg();
        let mut r1 = SplitMix64::new(9);
        let mut r2 = SplitMix64::new(9);
        let a = generate_pair::<f64>(&data[0], &cfg, (9, 9), &mut r1).unwrap();
        let b = generate_pair::<f64>(&data[0], &cfg, (9, 9), &mut r2).unwrap();
        assert_eq!(a.exemplar, b.exemplar);
        assert_eq!(a.search, b.search);
        assert_eq!(a.exemplar.shape(), &[1, 31, 31]);
        assert_eq!(a.search.shape(), &[1, 39, 39]);
    }

    #[test]
    fn edge_box_crop_uses_mean_fill_without_panic() {
        // Single-pair sequence whose box hugs the frame corner.
        let mut cfg = SceneConfig {
            frames: 2,
            width: 80,
            height: 70,
            ..SceneConfig::default()
        };
        cfg.motion.velocity = (-30.0, -30.0);
        cfg.motion.jitter_sigma = 0.0;
        let seq = generate_sequence(&cfg, 3).unwrap();
        assert!(seq.boxes[1].x <= 1.0 || seq.boxes[1].y <= 1.0);
        let tc = mini_train_cfg();
        let mut rng = SplitMix64::new(1);
        let pair = generate_pair::<f64>(&seq, &tc, (9, 9), &mut rng).unwrap();
        assert!(pair.exemplar.all_finite() && pair.search.all_finite());
    }

    #[test]
    fn single_frame_sequence_rejected() {
        let mut seq = mini_dataset(2).remove(0);
        seq.frames.truncate(1);
        seq.boxes.truncate(1);
        let mut rng = SplitMix64::new(1);
        assert!(matches!(
            generate_pair::<f64>(&seq, &mini_train_cfg(), (9, 9), &mut rng),
            Err(Error::InsufficientFrames(_))
        ));
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let data = mini_dataset(6);
        let cfg = mini_train_cfg();
        let m1 = Model::<f64>::init(ModelConfig::tiny(), 7).unwrap();
        let m2 = Model::<f64>::init(ModelConfig::tiny(), 7).unwrap();
        let o1 = train(m1, &data, &cfg, None).unwrap();
        let o2 = train(m2, &data, &cfg, None).unwrap();
        assert_eq!(o1.history.len(), 2);
        for (a, b) in o1.history.iter().zip(&o2.history) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits(), "loss history must be bit-identical");
        }
        assert!(o1.history[0].mean_loss.is_finite());
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = mini_train_cfg();
        let m = Model::<f64>::init(ModelConfig::tiny(), 7).unwrap();
        assert!(matches!(
            train(m, &[], &cfg, None),
            Err(Error::InsufficientFrames(_))
        ));
    }
}
