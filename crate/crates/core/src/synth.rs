//! Deterministic generator of TIR-like grayscale sequences.
//!
//! Scenes are white-hot: the tracked sprite is warmer than its smoothly
//! shaded background. Every byte is a pure function of (config, seed)
//! through the SplitMix64 stream, so suites regenerate identically on any
//! platform. Challenge knobs map onto the usual benchmark attributes:
//! size-change rate, cold occluder strips, global camera translation,
//! background drift, and motion jitter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sequence::{AnnotatedSequence, BoundingBox, Frame, SequenceMeta};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    Blob,
    Rect,
    /// Twin-lobe silhouette: small head ellipse over a wider body ellipse.
    Pedestrian,
}

impl SpriteKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SpriteKind::Blob => "blob",
            SpriteKind::Rect => "rect",
            SpriteKind::Pedestrian => "pedestrian",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpriteConfig {
    pub kind: SpriteKind,
    /// Mean intensity, must exceed the brightest background.
    pub intensity: f64,
    pub width: f64,
    pub height: f64,
    /// Per-frame multiplicative size change (0 = constant size).
    pub size_change_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MotionConfig {
    pub velocity: (f64, f64),
    /// Random-walk jitter standard deviation, pixels per frame.
    pub jitter_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OccluderConfig {
    /// A cold strip crosses the target every `period` frames...
    pub period: usize,
    /// ...staying for this many frames.
    pub duration: usize,
    /// Strip width as a fraction of the target width.
    pub width_frac: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistractorSpec {
    pub count: usize,
    /// Intensity offset relative to the target sprite.
    pub intensity_offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_level: f64,
    /// Amplitude of the smooth sinusoidal background shading.
    pub gradient_amplitude: f64,
    /// Phase drift of the shading per frame (dynamics change).
    pub gradient_drift: f64,
    /// Additive Gaussian noise sigma per frame.
    pub noise_sigma: f64,
    /// Global scene translation per frame (camera motion).
    pub camera_motion: (f64, f64),
    pub sprite: SpriteConfig,
    pub motion: MotionConfig,
    pub distractors: DistractorSpec,
    pub occluder: Option<OccluderConfig>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            frames: 60,
            background_level: 80.0,
            gradient_amplitude: 10.0,
            gradient_drift: 0.0,
            noise_sigma: 3.0,
            camera_motion: (0.0, 0.0),
            sprite: SpriteConfig {
                kind: SpriteKind::Blob,
                intensity: 180.0,
                width: 28.0,
                height: 24.0,
                size_change_rate: 0.0,
            },
            motion: MotionConfig {
                velocity: (1.5, 0.8),
                jitter_sigma: 0.3,
            },
            distractors: DistractorSpec {
                count: 0,
                intensity_offset: -25.0,
            },
            occluder: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidConfig("need at least 2 frames".into()));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::InvalidConfig("frame smaller than 32x32".into()));
        }
        let bg_max = self.background_level + self.gradient_amplitude;
        if self.sprite.intensity <= bg_max {
            return Err(Error::InvalidConfig(format!(
                "white-hot violated: sprite {} <= brightest background {}",
                self.sprite.intensity, bg_max
            )));
        }
        for v in [
            self.background_level - self.gradient_amplitude,
            bg_max,
            self.sprite.intensity,
            self.sprite.intensity + self.distractors.intensity_offset,
        ] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("intensity {} outside [0,255]", v)));
            }
        }
        if self.sprite.width < 6.0 || self.sprite.height < 6.0 {
            return Err(Error::InvalidConfig("sprite smaller than 6px".into()));
        }
        Ok(())
    }
}

// ------------------------------------------------------------- rendering

struct EntityTrack {
    kind: SpriteKind,
    intensity: f64,
    /// Per-frame center and size.
    centers: Vec<(f64, f64)>,
    sizes: Vec<(f64, f64)>,
}

struct OccluderStrip {
    /// Per-frame strip center x, or None when inactive.
    center_x: Vec<Option<f64>>,
    width: f64,
    intensity: f64,
}

struct Scene {
    width: usize,
    height: usize,
    frames: usize,
    background_level: f64,
    gradient_amplitude: f64,
    gradient_drift: f64,
    noise_sigma: f64,
    camera_motion: (f64, f64),
    target: EntityTrack,
    distractors: Vec<EntityTrack>,
    occluder: Option<OccluderStrip>,
}

fn inside_sprite(kind: SpriteKind, dx: f64, dy: f64, w: f64, h: f64) -> Option<f64> {
    // Returns a shading factor in (0, 1] when (dx, dy) from the center
    // lies inside the sprite.
    let (a, b) = (w / 2.0, h / 2.0);
    match kind {
        SpriteKind::Blob => {
            let r2 = (dx / a).powi(2) + (dy / b).powi(2);
            (r2 <= 1.0).then(|| 1.0 - 0.12 * r2)
        }
        SpriteKind::Rect => (dx.abs() <= a && dy.abs() <= b).then_some(1.0),
        SpriteKind::Pedestrian => {
            let head = ((dx / (0.22 * w)).powi(2) + ((dy + 0.35 * h) / (0.15 * h)).powi(2)) <= 1.0;
            let body = ((dx / (0.5 * w)).powi(2) + ((dy - 0.15 * h) / (0.35 * h)).powi(2)) <= 1.0;
            (head || body).then_some(1.0)
        }
    }
}

fn render(scene: &Scene, noise_rng: &mut SplitMix64, name: &str, meta: Option<SequenceMeta>) -> AnnotatedSequence {
    let (w, h) = (scene.width, scene.height);
    let mut frames = Vec::with_capacity(scene.frames);
    let mut boxes = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let mut canvas = vec![0.0f64; w * h];
        // Smooth shaded background, drifting with camera motion and time.
        let phase = scene.gradient_drift * t as f64;
        let (camx, camy) = (
            scene.camera_motion.0 * t as f64,
            scene.camera_motion.1 * t as f64,
        );
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + camx) / w as f64;
                let v = (y as f64 + camy) / h as f64;
                canvas[y * w + x] = scene.background_level
                    + scene.gradient_amplitude * (std::f64::consts::PI * (u + v) + phase).sin();
            }
        }
        // Distractors first, target last so the target stays on top.
        for ent in scene.distractors.iter().chain(std::iter::once(&scene.target)) {
            let (cx, cy) = ent.centers[t];
            let (ew, eh) = ent.sizes[t];
            let x0 = ((cx - ew / 2.0).floor().max(0.0)) as usize;
            let x1 = ((cx + ew / 2.0).ceil().min(w as f64 - 1.0)) as usize;
            let y0 = ((cy - eh / 2.0).floor().max(0.0)) as usize;
            let y1 = ((cy + eh / 2.0).ceil().min(h as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some(shade) =
                        inside_sprite(ent.kind, x as f64 - cx, y as f64 - cy, ew, eh)
                    {
                        canvas[y * w + x] = ent.intensity * shade;
                    }
                }
            }
        }
        // Cold strip over the target.
        if let Some(occ) = &scene.occluder {
            if let Some(sx) = occ.center_x[t] {
                let x0 = ((sx - occ.width / 2.0).floor().max(0.0)) as usize;
                let x1 = ((sx + occ.width / 2.0).ceil().min(w as f64 - 1.0)) as usize;
                for y in 0..h {
                    for x in x0..=x1 {
                        canvas[y * w + x] = occ.intensity;
                    }
                }
            }
        }
        // Sensor noise, then quantize.
        let mut data = Vec::with_capacity(w * h);
        for v in canvas {
            let n = if scene.noise_sigma > 0.0 {
                noise_rng.next_normal() * scene.noise_sigma
            } else {
                0.0
            };
            data.push((v + n).round().clamp(0.0, 255.0) as u8);
        }
        frames.push(Frame {
            width: w,
            height: h,
            data,
        });
        let (cx, cy) = scene.target.centers[t];
        let (tw, th) = scene.target.sizes[t];
        boxes.push(BoundingBox::from_center(cx, cy, tw, th).clip(w, h));
    }
    AnnotatedSequence {
        name: name.to_string(),
        class_tag: scene.target.kind.tag().to_string(),
        frames,
        boxes,
        meta,
    }
}

// ------------------------------------------------------------ simulation

fn clamp_center(c: f64, half: f64, limit: f64) -> f64 {
    if 2.0 * half >= limit {
        limit / 2.0
    } else {
        c.clamp(half, limit - half)
    }
}

fn simulate_target(cfg: &SceneConfig, start: (f64, f64), rng: &mut SplitMix64) -> EntityTrack {
    let mut centers = Vec::with_capacity(cfg.frames);
    let mut sizes = Vec::with_capacity(cfg.frames);
    let (mut cx, mut cy) = start;
    let (mut sw, mut sh) = (cfg.sprite.width, cfg.sprite.height);
    let (vx, vy) = (
        cfg.motion.velocity.0 + cfg.camera_motion.0,
        cfg.motion.velocity.1 + cfg.camera_motion.1,
    );
    for t in 0..cfg.frames {
        if t > 0 {
            let (jx, jy) = if cfg.motion.jitter_sigma > 0.0 {
                (
                    rng.next_normal() * cfg.motion.jitter_sigma,
                    rng.next_normal() * cfg.motion.jitter_sigma,
                )
            } else {
                (0.0, 0.0)
            };
            cx += vx + jx;
            cy += vy + jy;
            let grow = 1.0 + cfg.sprite.size_change_rate;
            sw = (sw * grow).clamp(6.0, cfg.width as f64 / 2.0);
            sh = (sh * grow).clamp(6.0, cfg.height as f64 / 2.0);
        }
        cx = clamp_center(cx, sw / 2.0, cfg.width as f64);
        cy = clamp_center(cy, sh / 2.0, cfg.height as f64);
        centers.push((cx, cy));
        sizes.push((sw, sh));
    }
    EntityTrack {
        kind: cfg.sprite.kind,
        intensity: cfg.sprite.intensity,
        centers,
        sizes,
    }
}

fn simulate_roaming_distractor(cfg: &SceneConfig, rng: &mut SplitMix64) -> EntityTrack {
    let sw = cfg.sprite.width * rng.range_f64(0.85, 1.15);
    let sh = cfg.sprite.height * rng.range_f64(0.85, 1.15);
    let mut cx = rng.range_f64(sw, cfg.width as f64 - sw);
    let mut cy = rng.range_f64(sh, cfg.height as f64 - sh);
    let mut vx = rng.range_f64(-2.0, 2.0) + cfg.camera_motion.0;
    let mut vy = rng.range_f64(-2.0, 2.0) + cfg.camera_motion.1;
    let mut centers = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            cx += vx;
            cy += vy;
            if cx < sw / 2.0 || cx > cfg.width as f64 - sw / 2.0 {
                vx = -vx;
                cx = clamp_center(cx, sw / 2.0, cfg.width as f64);
            }
            if cy < sh / 2.0 || cy > cfg.height as f64 - sh / 2.0 {
                vy = -vy;
                cy = clamp_center(cy, sh / 2.0, cfg.height as f64);
            }
        }
        centers.push((cx, cy));
    }
    EntityTrack {
        kind: cfg.sprite.kind,
        intensity: cfg.sprite.intensity + cfg.distractors.intensity_offset,
        centers,
        sizes: vec![(sw, sh); cfg.frames],
    }
}

fn occluder_schedule(cfg: &SceneConfig, target: &EntityTrack) -> Option<OccluderStrip> {
    let occ = cfg.occluder.as_ref()?;
    let center_x = (0..cfg.frames)
        .map(|t| {
            // Never active on the first cycle so frame 0 stays clean.
            (t >= occ.period && t % occ.period < occ.duration).then(|| target.centers[t].0)
        })
        .collect();
    Some(OccluderStrip {
        center_x,
        width: occ.width_frac * cfg.sprite.width,
        intensity: occ.intensity,
    })
}

/// Render a full sequence from a config and seed. Identical arguments
/// produce byte-identical frames and annotations.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<AnnotatedSequence> {
    generate_named(cfg, seed, &format!("seq_{:04}", seed % 10_000))
}

fn generate_named(cfg: &SceneConfig, seed: u64, name: &str) -> Result<AnnotatedSequence> {
    cfg.validate()?;
    let mut rng = SplitMix64::derive(seed, 0x5CE);
    let start = (
        rng.range_f64(0.3, 0.7) * cfg.width as f64,
        rng.range_f64(0.3, 0.7) * cfg.height as f64,
    );
    let target = simulate_target(cfg, start, &mut rng);
    let distractors: Vec<EntityTrack> = (0..cfg.distractors.count)
        .map(|_| simulate_roaming_distractor(cfg, &mut rng))
        .collect();
    let occluder = occluder_schedule(cfg, &target);
    let scene = Scene {
        width: cfg.width,
        height: cfg.height,
        frames: cfg.frames,
        background_level: cfg.background_level,
        gradient_amplitude: cfg.gradient_amplitude,
        gradient_drift: cfg.gradient_drift,
        noise_sigma: cfg.noise_sigma,
        camera_motion: cfg.camera_motion,
        target,
        distractors,
        occluder,
    };
    let mut noise_rng = SplitMix64::derive(seed, 0x4015E);
    let meta = SequenceMeta {
        seed,
        config: serde_json::to_value(cfg)?,
    };
    Ok(render(&scene, &mut noise_rng, name, Some(meta)))
}

// ---------------------------------------------------------------- suites

/// Varied training battery covering the challenge knobs.
pub fn train_suite(seed: u64, count: usize, frames: usize) -> Result<Vec<AnnotatedSequence>> {
    let kinds = [SpriteKind::Blob, SpriteKind::Pedestrian, SpriteKind::Rect];
    let mut rng = SplitMix64::derive(seed, 0x7121);
    (0..count)
        .map(|i| {
            let mut cfg = SceneConfig {
                frames,
                ..SceneConfig::default()
            };
            cfg.sprite.kind = kinds[i % kinds.len()];
            cfg.sprite.width = rng.range_f64(18.0, 40.0);
            cfg.sprite.height = rng.range_f64(18.0, 36.0);
            cfg.sprite.intensity = rng.range_f64(150.0, 210.0);
            cfg.sprite.size_change_rate = rng.range_f64(-0.004, 0.004);
            cfg.motion.velocity = (rng.range_f64(-2.2, 2.2), rng.range_f64(-1.6, 1.6));
            cfg.motion.jitter_sigma = rng.range_f64(0.0, 0.7);
            cfg.background_level = rng.range_f64(60.0, 100.0);
            cfg.gradient_amplitude = rng.range_f64(5.0, 15.0);
            cfg.noise_sigma = rng.range_f64(1.0, 4.0);
            if i % 3 == 1 {
                cfg.distractors.count = 1 + (i % 2);
            }
            if i % 4 == 2 {
                cfg.occluder = Some(OccluderConfig {
                    period: 12,
                    duration: 3,
                    width_frac: 0.45,
                    intensity: 30.0,
                });
            }
            if i % 5 == 3 {
                cfg.gradient_drift = 0.05;
            }
            if i % 5 == 4 {
                cfg.camera_motion = (rng.range_f64(-0.5, 0.5), rng.range_f64(-0.4, 0.4));
            }
            let child = rng.next_u64();
            generate_named(&cfg, child, &format!("train_{:03}", i))
        })
        .collect()
}

/// Constant-velocity, distractor-free battery for baseline competence.
pub fn easy_suite(seed: u64, count: usize, frames: usize) -> Result<Vec<AnnotatedSequence>> {
    let mut rng = SplitMix64::derive(seed, 0xEA57);
    (0..count)
        .map(|i| {
            let mut cfg = SceneConfig {
                frames,
                ..SceneConfig::default()
            };
            cfg.sprite.kind = if i % 2 == 0 {
                SpriteKind::Blob
            } else {
                SpriteKind::Pedestrian
            };
            cfg.sprite.width = rng.range_f64(24.0, 34.0);
            cfg.sprite.height = rng.range_f64(22.0, 32.0);
            cfg.motion.velocity = (rng.range_f64(0.8, 1.8), rng.range_f64(-1.0, 1.0));
            cfg.motion.jitter_sigma = 0.0;
            cfg.noise_sigma = 2.0;
            let child = rng.next_u64();
            generate_named(&cfg, child, &format!("easy_{:03}", i))
        })
        .collect()
}

/// Number of sequences in the standard distractor battery.
pub const DISTRACTOR_SUITE_SIZE: usize = 10;
/// Frames per distractor-battery sequence.
pub const DISTRACTOR_SUITE_FRAMES: usize = 100;

/// Battery where at least two same-family distractors pass within 1.5
/// target widths of the target's path in every sequence.
pub fn distractor_suite(seed: u64) -> Result<Vec<AnnotatedSequence>> {
    let mut rng = SplitMix64::derive(seed, 0xD157);
    (0..DISTRACTOR_SUITE_SIZE)
        .map(|i| {
            let mut cfg = SceneConfig {
                frames: DISTRACTOR_SUITE_FRAMES,
                ..SceneConfig::default()
            };
            cfg.sprite.kind = if i % 2 == 0 {
                SpriteKind::Blob
            } else {
                SpriteKind::Pedestrian
            };
            cfg.sprite.width = rng.range_f64(24.0, 32.0);
            cfg.sprite.height = rng.range_f64(22.0, 30.0);
            cfg.sprite.intensity = rng.range_f64(170.0, 190.0);
            cfg.motion.velocity = (rng.range_f64(-1.2, 1.2), rng.range_f64(-0.9, 0.9));
            cfg.motion.jitter_sigma = 0.25;
            cfg.noise_sigma = 2.5;
            cfg.distractors.intensity_offset = -12.0;
            cfg.validate()?;

            let child = rng.next_u64();
            let mut sim_rng = SplitMix64::derive(child, 0x5CE);
            let start = (
                sim_rng.range_f64(0.35, 0.65) * cfg.width as f64,
                sim_rng.range_f64(0.35, 0.65) * cfg.height as f64,
            );
            let target = simulate_target(&cfg, start, &mut sim_rng);

            // Two choreographed crossers: each passes within ~0.9 target
            // widths at its meeting frame.
            let mut distractors = Vec::new();
            for (k, meet_t) in [(0usize, 35usize), (1usize, 65usize)] {
                let (tx, ty) = target.centers[meet_t];
                let angle = sim_rng.range_f64(0.0, std::f64::consts::TAU);
                let approach = 0.9 * cfg.sprite.width;
                let meet = (tx + approach * angle.cos(), ty + approach * angle.sin());
                let dir = sim_rng.range_f64(0.0, std::f64::consts::TAU);
                let speed = sim_rng.range_f64(1.0, 1.8);
                let (dvx, dvy) = (speed * dir.cos(), speed * dir.sin());
                let sw = cfg.sprite.width * sim_rng.range_f64(0.9, 1.1);
                let sh = cfg.sprite.height * sim_rng.range_f64(0.9, 1.1);
                let centers: Vec<(f64, f64)> = (0..cfg.frames)
                    .map(|t| {
                        let dt = t as f64 - meet_t as f64;
                        (meet.0 + dvx * dt, meet.1 + dvy * dt)
                    })
                    .collect();
                distractors.push(EntityTrack {
                    kind: cfg.sprite.kind,
                    intensity: cfg.sprite.intensity + cfg.distractors.intensity_offset,
                    centers,
                    sizes: vec![(sw, sh); cfg.frames],
                });
                let _ = k;
            }
            cfg.distractors.count = distractors.len();

            let scene = Scene {
                width: cfg.width,
                height: cfg.height,
                frames: cfg.frames,
                background_level: cfg.background_level,
                gradient_amplitude: cfg.gradient_amplitude,
                gradient_drift: cfg.gradient_drift,
                noise_sigma: cfg.noise_sigma,
                camera_motion: cfg.camera_motion,
                target,
                distractors,
                occluder: None,
            };
            let mut noise_rng = SplitMix64::derive(child, 0x4015E);
            let meta = SequenceMeta {
                seed: child,
                config: serde_json::to_value(&cfg)?,
            };
            Ok(render(
                &scene,
                &mut noise_rng,
                &format!("distractor_{:03}", i),
                Some(meta),
            ))
        })
        .collect()
}
