//! Synthetic surveillance-style scenes with labelled anomaly intervals.
//!
//! Every clip shows the same static textured background with a few upright
//! "walker" sprites moving right at constant speed, wrapping around the frame.
//! Test clips additionally contain one anomalous actor for a bounded
//! interval: a walker turned on its side, a walker moving left, a walker
//! moving much faster, or a shape never seen in training. Frames are labelled
//! 0 exactly while the anomalous actor is present.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{write_clip, GrayImage};
use crate::error::{Error, Result};
use crate::rng::{split, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    RotatedSprite,
    ReversedMotion,
    SpeedAnomaly,
    UnseenShape,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::RotatedSprite,
        AnomalyKind::ReversedMotion,
        AnomalyKind::SpeedAnomaly,
        AnomalyKind::UnseenShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::RotatedSprite => "rotated_sprite",
            AnomalyKind::ReversedMotion => "reversed_motion",
            AnomalyKind::SpeedAnomaly => "speed_anomaly",
            AnomalyKind::UnseenShape => "unseen_shape",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown anomaly type `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub clip_length: usize,
    /// Normal walkers per clip.
    pub sprites: usize,
    pub sprite_height: usize,
    pub sprite_width: usize,
    /// Horizontal speed range of normal walkers, pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Speed multiplier of a `speed_anomaly` actor.
    pub speed_factor: f64,
    /// Test clip `i` receives `anomaly_types[i % len]`; empty means none.
    pub anomaly_types: Vec<AnomalyKind>,
    /// Anomaly interval length range, in frames (inclusive).
    pub anomaly_length: [usize; 2],
    /// Earliest frame an anomaly may start on.
    pub anomaly_earliest: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            frame_height: 96,
            frame_width: 144,
            train_clips: 8,
            test_clips: 4,
            clip_length: 150,
            sprites: 3,
            sprite_height: 16,
            sprite_width: 10,
            speed_min: 1.5,
            speed_max: 2.5,
            speed_factor: 3.0,
            anomaly_types: AnomalyKind::ALL.to_vec(),
            anomaly_length: [30, 50],
            anomaly_earliest: 20,
            seed: 7,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("synthetic config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synthetic config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::config("frame_height", "frame dimensions must be positive"));
        }
        if self.sprite_height == 0 || self.sprite_width == 0 {
            return Err(Error::config("sprite_height", "sprite dimensions must be positive"));
        }
        let side = self.sprite_height.max(self.sprite_width);
        if side + 2 > self.frame_height || side + 2 > self.frame_width {
            return Err(Error::config(
                "sprite_height",
                format!(
                    "a {}x{} sprite does not fit a {}x{} frame",
                    self.sprite_height, self.sprite_width, self.frame_height, self.frame_width
                ),
            ));
        }
        if self.clip_length < 2 {
            return Err(Error::config("clip_length", "must be at least 2"));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return Err(Error::config("speed_min", "need 0 < speed_min <= speed_max"));
        }
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return Err(Error::config("speed_factor", "must be positive"));
        }
        let [lo, hi] = self.anomaly_length;
        if !self.anomaly_types.is_empty() && self.test_clips > 0 {
            if lo == 0 || hi < lo {
                return Err(Error::config("anomaly_length", format!("invalid range [{lo}, {hi}]")));
            }
            if self.anomaly_earliest + hi > self.clip_length {
                return Err(Error::config(
                    "anomaly_length",
                    format!(
                        "an interval of {hi} frames starting at {} exceeds the clip length {}",
                        self.anomaly_earliest, self.clip_length
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Walker,
    WalkerOnSide,
    Diamond,
}

/// Binary mask of a shape at the configured sprite size.
fn mask(shape: Shape, h: usize, w: usize) -> (usize, usize, Vec<bool>) {
    match shape {
        Shape::Walker => {
            // a "P": full-height spine on the left, a head block to the front
            // at the top, and a foot sticking forward at the bottom
            let spine = (w / 3).max(1);
            let head_h = (h * 2 / 5).max(1);
            let foot_h = (h / 8).max(1);
            let mut m = vec![false; h * w];
            for y in 0..h {
                for x in 0..w {
                    m[y * w + x] = x < spine || y < head_h || (y >= h - foot_h && x < w * 2 / 3);
                }
            }
            (h, w, m)
        }
        Shape::WalkerOnSide => {
            let (_, _, m) = mask(Shape::Walker, h, w);
            // quarter turn clockwise: the walker lies on its back
            let mut r = vec![false; h * w];
            for y in 0..h {
                for x in 0..w {
                    r[x * h + (h - 1 - y)] = m[y * w + x];
                }
            }
            (w, h, r)
        }
        Shape::Diamond => {
            let side = h.min(w.max(h * 3 / 4));
            let c = (side as f64 - 1.0) / 2.0;
            let mut m = vec![false; side * side];
            for y in 0..side {
                for x in 0..side {
                    m[y * side + x] = (x as f64 - c).abs() + (y as f64 - c).abs() <= c + 0.5;
                }
            }
            (side, side, m)
        }
    }
}

#[derive(Clone, Debug)]
struct Actor {
    shape: Shape,
    y: usize,
    x0: f64,
    speed: f64,
    active: std::ops::Range<usize>,
    intensity: f64,
}

fn render(cfg: &SyntheticSceneConfig, background: &[u8], actors: &[Actor], t: usize) -> GrayImage {
    let (fh, fw) = (cfg.frame_height, cfg.frame_width);
    let mut img: Vec<f64> = background.iter().map(|&v| v as f64).collect();
    for a in actors.iter().filter(|a| a.active.contains(&t)) {
        let (mh, mw, m) = mask(a.shape, cfg.sprite_height, cfg.sprite_width);
        let period = (fw + mw) as f64;
        let local = (t - a.active.start) as f64;
        let x = (a.x0 + a.speed * local).rem_euclid(period) - mw as f64;
        let xi = x.floor();
        let frac = x - xi;
        for yy in 0..mh {
            let row = a.y + yy;
            if row >= fh {
                continue;
            }
            for xx in 0..mw {
                if !m[yy * mw + xx] {
                    continue;
                }
                // horizontal area coverage keeps sub-pixel motion smooth
                for (dx, cover) in [(0.0, 1.0 - frac), (1.0, frac)] {
                    let col = xi + xx as f64 + dx;
                    if cover <= 0.0 || col < 0.0 || col >= fw as f64 {
                        continue;
                    }
                    let i = row * fw + col as usize;
                    img[i] += cover * (a.intensity - img[i]);
                }
            }
        }
    }
    GrayImage {
        height: fh,
        width: fw,
        data: img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Smooth static texture in roughly `[110, 200]`.
fn background(cfg: &SyntheticSceneConfig) -> Vec<u8> {
    let mut rng = split(cfg.seed, Stream::Synth, u64::MAX);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(4.0..9.0),
            )
        })
        .collect();
    let (h, w) = (cfg.frame_height as f64, cfg.frame_width as f64);
    let mut out = Vec::with_capacity(cfg.frame_height * cfg.frame_width);
    for y in 0..cfg.frame_height {
        for x in 0..cfg.frame_width {
            let (u, v) = (x as f64 / w, y as f64 / h);
            let mut val = 140.0 + 30.0 * v;
            for &(fx, fy, ph, amp) in &waves {
                val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
            out.push(val.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn normal_walkers<R: Rng>(cfg: &SyntheticSceneConfig, rng: &mut R) -> Vec<Actor> {
    let lanes = cfg.frame_height - cfg.sprite_height;
    (0..cfg.sprites)
        .map(|_| Actor {
            shape: Shape::Walker,
            y: rng.random_range(0..=lanes),
            x0: rng.random_range(0.0..(cfg.frame_width + cfg.sprite_width) as f64),
            speed: rng.random_range(cfg.speed_min..=cfg.speed_max),
            active: 0..cfg.clip_length,
            intensity: rng.random_range(25.0..60.0),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticClip {
    pub id: String,
    pub frames: Vec<GrayImage>,
    pub labels: Option<Vec<u8>>,
    /// Kind and frame range of the anomalous actor, if any.
    pub anomaly: Option<(AnomalyKind, std::ops::Range<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
}

impl SyntheticCorpus {
    /// Writes the `<root>/{train,test}/<clip>/` layout.
    pub fn write(&self, root: &Path) -> Result<()> {
        for (split_name, clips) in [("train", &self.train), ("test", &self.test)] {
            for c in clips {
                write_clip(&root.join(split_name).join(&c.id), &c.frames, c.labels.as_deref())?;
            }
        }
        Ok(())
    }
}

/// Per-frame labels implied by a scene: 0 while any anomalous actor is active.
fn label_frames(len: usize, anomaly: Option<&std::ops::Range<usize>>) -> Vec<u8> {
    (0..len).map(|t| u8::from(!anomaly.is_some_and(|r| r.contains(&t)))).collect()
}

/// Deterministic in `cfg.seed`; training clips never contain an anomalous actor.
pub fn synth_generate(cfg: &SyntheticSceneConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let bg = background(cfg);
    let len = cfg.clip_length;
    let train = (0..cfg.train_clips)
        .map(|i| {
            let mut rng = split(cfg.seed, Stream::Synth, i as u64);
            let actors = normal_walkers(cfg, &mut rng);
            SyntheticClip {
                id: format!("clip{i:02}"),
                frames: (0..len).map(|t| render(cfg, &bg, &actors, t)).collect(),
                labels: None,
                anomaly: None,
            }
        })
        .collect();
    let test = (0..cfg.test_clips)
        .map(|i| {
            let mut rng = split(cfg.seed, Stream::Synth, 1_000_000 + i as u64);
            let mut actors = normal_walkers(cfg, &mut rng);
            let anomaly = (!cfg.anomaly_types.is_empty()).then(|| {
                let kind = cfg.anomaly_types[i % cfg.anomaly_types.len()];
                let [lo, hi] = cfg.anomaly_length;
                let n = rng.random_range(lo..=hi);
                let start = rng.random_range(cfg.anomaly_earliest..=len - n);
                let base = rng.random_range(cfg.speed_min..=cfg.speed_max);
                let (shape, speed) = match kind {
                    AnomalyKind::RotatedSprite => (Shape::WalkerOnSide, base),
                    AnomalyKind::ReversedMotion => (Shape::Walker, -base),
                    AnomalyKind::SpeedAnomaly => (Shape::Walker, base * cfg.speed_factor),
                    AnomalyKind::UnseenShape => (Shape::Diamond, base),
                };
                let (mh, mw, _) = mask(shape, cfg.sprite_height, cfg.sprite_width);
                actors.push(Actor {
                    shape,
                    y: rng.random_range(0..=cfg.frame_height - mh),
                    x0: rng.random_range(mw as f64..(cfg.frame_width + mw) as f64 * 0.75),
                    speed,
                    active: start..start + n,
                    intensity: rng.random_range(25.0..60.0),
                });
                (kind, start..start + n)
            });
            SyntheticClip {
                id: format!("clip{i:02}"),
                frames: (0..len).map(|t| render(cfg, &bg, &actors, t)).collect(),
                labels: Some(label_frames(len, anomaly.as_ref().map(|(_, r)| r))),
                anomaly,
            }
        })
        .collect();
    Ok(SyntheticCorpus { train, test })
}
