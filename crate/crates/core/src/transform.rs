//! Patch anomaly generation: frame cuboids, patch region sampling, spatial
//! rotation (SRT), temporal mixing (TMT), policy selection and input noise.
//!
//! Every transform works in place on the patch region only. The thread-local
//! [`counters`] record each call and every pixel written, which lets the
//! evaluation path prove it never reaches this module.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single grayscale frame, row-major, model range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

/// `n` frames stacked on the temporal axis, layout `[1, n, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCuboid {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FrameCuboid {
    /// Stacks exactly `window` frames in order. Values must lie in `[-1, 1]`.
    pub fn from_frames(frames: &[&Frame], window: usize) -> Result<Self> {
        if frames.len() != window {
            return Err(Error::Shape(format!(
                "cuboid needs {window} frames, got {}",
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        let mut data = Vec::with_capacity(window * h * w);
        for (i, f) in frames.iter().enumerate() {
            if (f.height, f.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
            if let Some(v) = f.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::Invalid(format!("frame {i} has value {v} outside [-1, 1]")));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(FrameCuboid {
            frames: window,
            height: h,
            width: w,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn slice(&self, t: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[t * plane..(t + 1) * plane]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            data: self.slice(t).to_vec(),
        }
    }

    fn check_region(&self, r: &PatchRegion) -> Result<()> {
        if r.width == 0 || r.height == 0 || r.x + r.width > self.width || r.y + r.height > self.height {
            return Err(Error::Invalid(format!(
                "patch {r} outside {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn copy_patch(&self, t: usize, r: &PatchRegion, out: &mut [f32]) {
        let base = t * self.height * self.width;
        for row in 0..r.height {
            let src = base + (r.y + row) * self.width + r.x;
            out[row * r.width..(row + 1) * r.width].copy_from_slice(&self.data[src..src + r.width]);
        }
    }

    fn write_patch(&mut self, t: usize, r: &PatchRegion, patch: &[f32]) {
        let base = t * self.height * self.width;
        for row in 0..r.height {
            let dst = base + (r.y + row) * self.width + r.x;
            self.data[dst..dst + r.width].copy_from_slice(&patch[row * r.width..(row + 1) * r.width]);
        }
        bump(|c| c.pixels_written += (r.width * r.height) as u64);
    }
}

/// Call and pixel-write counts for the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransformCounters {
    pub srt_calls: u64,
    pub tmt_calls: u64,
    pub noise_calls: u64,
    pub pixels_written: u64,
}

impl TransformCounters {
    pub fn total_calls(&self) -> u64 {
        self.srt_calls + self.tmt_calls + self.noise_calls
    }

    pub fn since(&self, earlier: &TransformCounters) -> TransformCounters {
        TransformCounters {
            srt_calls: self.srt_calls - earlier.srt_calls,
            tmt_calls: self.tmt_calls - earlier.tmt_calls,
            noise_calls: self.noise_calls - earlier.noise_calls,
            pixels_written: self.pixels_written - earlier.pixels_written,
        }
    }
}

thread_local! {
    static COUNTERS: Cell<TransformCounters> = Cell::new(TransformCounters::default());
}

fn bump(f: impl FnOnce(&mut TransformCounters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub fn counters() -> TransformCounters {
    COUNTERS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRegion {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl fmt::Display for PatchRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.width, self.height)
    }
}

/// Patch size and the vertical exclusion margin, as a fraction of frame height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub width: usize,
    pub height: usize,
    pub margin_frac: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            width: 60,
            height: 60,
            margin_frac: 0.125,
        }
    }
}

impl PatchConfig {
    pub fn square(size: usize) -> Self {
        PatchConfig {
            width: size,
            height: size,
            ..Self::default()
        }
    }

    /// Rows excluded at the top and at the bottom: `round(margin_frac · H)`, halves up.
    pub fn margin(&self, frame_height: usize) -> usize {
        (self.margin_frac * frame_height as f64 + 0.5).floor() as usize
    }

    /// Inclusive `(x, y)` ranges of the admissible top-left corner.
    pub fn admissible(&self, frame_height: usize, frame_width: usize) -> Result<((usize, usize), (usize, usize))> {
        if !(0.0..0.5).contains(&self.margin_frac) {
            return Err(Error::config("margin_frac", format!("{} not in [0, 0.5)", self.margin_frac)));
        }
        let m = self.margin(frame_height);
        if self.width == 0 || self.height == 0 || self.width > frame_width || self.height + 2 * m > frame_height {
            return Err(Error::Invalid(format!(
                "patch {}x{} does not fit a {frame_height}x{frame_width} frame with a {m}-row margin",
                self.height, self.width
            )));
        }
        Ok(((0, frame_width - self.width), (m, frame_height - self.height - m)))
    }
}

/// Uniform top-left corner within the margin-restricted band.
pub fn sample_patch_region<R: Rng + ?Sized>(
    rng: &mut R,
    frame_height: usize,
    frame_width: usize,
    patch: &PatchConfig,
) -> Result<PatchRegion> {
    let ((x0, x1), (y0, y1)) = patch.admissible(frame_height, frame_width)?;
    Ok(PatchRegion {
        x: rng.random_range(x0..=x1),
        y: rng.random_range(y0..=y1),
        width: patch.width,
        height: patch.height,
    })
}

/// Counter-clockwise right-angle rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn from_degrees(d: u32) -> Option<Self> {
        Rotation::ALL.into_iter().find(|r| r.degrees() == d)
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Rotation::ALL[rng.random_range(0..4)]
    }
}

/// Rotates a row-major patch; quarter turns assume a `side × side` square.
fn rotate_patch(src: &[f32], side: usize, rot: Rotation, dst: &mut [f32]) {
    let s = side;
    match rot {
        Rotation::R0 => dst.copy_from_slice(src),
        Rotation::R180 => {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        Rotation::R90 => {
            for i in 0..s {
                for j in 0..s {
                    dst[i * s + j] = src[j * s + (s - 1 - i)];
                }
            }
        }
        Rotation::R270 => {
            for i in 0..s {
                for j in 0..s {
                    dst[i * s + j] = src[(s - 1 - j) * s + i];
                }
            }
        }
    }
}

/// Spatial rotation: frame `i`'s patch is rotated by `directions[i]`.
pub fn srt(mut cuboid: FrameCuboid, region: &PatchRegion, directions: &[Rotation]) -> Result<FrameCuboid> {
    cuboid.check_region(region)?;
    if directions.len() != cuboid.frames {
        return Err(Error::Invalid(format!(
            "{} directions for {} frames",
            directions.len(),
            cuboid.frames
        )));
    }
    if region.width != region.height && directions.iter().any(|d| matches!(d, Rotation::R90 | Rotation::R270)) {
        return Err(Error::Invalid(format!(
            "quarter-turn rotation needs a square patch, got {}x{}",
            region.height, region.width
        )));
    }
    bump(|c| c.srt_calls += 1);
    let len = region.width * region.height;
    let mut patch = vec![0.0; len];
    let mut rotated = vec![0.0; len];
    for (t, &rot) in directions.iter().enumerate() {
        cuboid.copy_patch(t, region, &mut patch);
        rotate_patch(&patch, region.height, rot, &mut rotated);
        cuboid.write_patch(t, region, &rotated);
    }
    Ok(cuboid)
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || !perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Temporal mixing: output frame `i`'s patch is input frame `perm[i]`'s patch.
pub fn tmt(mut cuboid: FrameCuboid, region: &PatchRegion, perm: &[usize]) -> Result<FrameCuboid> {
    cuboid.check_region(region)?;
    check_permutation(perm, cuboid.frames)?;
    bump(|c| c.tmt_calls += 1);
    let len = region.width * region.height;
    let mut patches = vec![0.0; len * cuboid.frames];
    for t in 0..cuboid.frames {
        cuboid.copy_patch(t, region, &mut patches[t * len..(t + 1) * len]);
    }
    for (t, &src) in perm.iter().enumerate() {
        cuboid.write_patch(t, region, &patches[src * len..(src + 1) * len]);
    }
    Ok(cuboid)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    None,
    Srt,
    Tmt,
    Both,
}

impl TransformMode {
    fn name(self) -> &'static str {
        match self {
            TransformMode::None => "none",
            TransformMode::Srt => "srt",
            TransformMode::Tmt => "tmt",
            TransformMode::Both => "both",
        }
    }
}

/// Which transforms a training input may receive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformPolicy {
    Baseline,
    #[serde(rename = "tmt")]
    TmtOnly,
    #[serde(rename = "srt")]
    SrtOnly,
    TmtOrSrtChunk,
    TmtOrSrt,
    TmtAndSrt,
}

impl TransformPolicy {
    pub const ALL: [TransformPolicy; 6] = [
        TransformPolicy::Baseline,
        TransformPolicy::TmtOnly,
        TransformPolicy::SrtOnly,
        TransformPolicy::TmtOrSrtChunk,
        TransformPolicy::TmtOrSrt,
        TransformPolicy::TmtAndSrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformPolicy::Baseline => "baseline",
            TransformPolicy::TmtOnly => "tmt",
            TransformPolicy::SrtOnly => "srt",
            TransformPolicy::TmtOrSrtChunk => "tmt-or-srt-chunk",
            TransformPolicy::TmtOrSrt => "tmt-or-srt",
            TransformPolicy::TmtAndSrt => "tmt-and-srt",
        }
    }
}

impl fmt::Display for TransformPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}`")))
    }
}

/// Complete record of one patch anomaly event; replaying it on the same
/// input reproduces the transformed cuboid exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformSpec {
    pub mode: TransformMode,
    pub region: Option<PatchRegion>,
    pub directions: Vec<Rotation>,
    pub permutation: Vec<usize>,
}

impl TransformSpec {
    pub fn identity(n: usize) -> Self {
        TransformSpec {
            mode: TransformMode::None,
            region: None,
            directions: vec![Rotation::R0; n],
            permutation: (0..n).collect(),
        }
    }

    pub fn replay(&self, cuboid: FrameCuboid) -> Result<FrameCuboid> {
        let Some(region) = self.region.as_ref() else {
            return Ok(cuboid);
        };
        match self.mode {
            TransformMode::None => Ok(cuboid),
            TransformMode::Srt => srt(cuboid, region, &self.directions),
            TransformMode::Tmt => tmt(cuboid, region, &self.permutation),
            TransformMode::Both => srt(tmt(cuboid, region, &self.permutation)?, region, &self.directions),
        }
    }
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for TransformSpec {
    /// `mode=srt region=x,y,w,h dirs=0,90,... perm=0,1,...`; region `-` when absent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let region = self.region.map_or_else(|| "-".to_string(), |r| r.to_string());
        write!(
            f,
            "mode={} region={} dirs={} perm={}",
            self.mode.name(),
            region,
            join(self.directions.iter().map(|d| d.degrees())),
            join(&self.permutation)
        )
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::format("transform record", format!("{msg} in `{line}`"));
        let mut mode = None;
        let mut region = None;
        let mut directions = None;
        let mut permutation = None;
        let nums = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|s| s.parse().map_err(|_| bad("bad number"))).collect()
        };
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("missing `=`"))?;
            match k {
                "mode" => {
                    mode = Some(match v {
                        "none" => TransformMode::None,
                        "srt" => TransformMode::Srt,
                        "tmt" => TransformMode::Tmt,
                        "both" => TransformMode::Both,
                        _ => return Err(bad("unknown mode")),
                    })
                }
                "region" => {
                    region = Some(if v == "-" {
                        None
                    } else {
                        let n = nums(v)?;
                        if n.len() != 4 {
                            return Err(bad("region needs four numbers"));
                        }
                        Some(PatchRegion {
                            x: n[0],
                            y: n[1],
                            width: n[2],
                            height: n[3],
                        })
                    })
                }
                "dirs" => {
                    directions = Some(
                        nums(v)?
                            .into_iter()
                            .map(|d| Rotation::from_degrees(d as u32).ok_or_else(|| bad("bad direction")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "perm" => permutation = Some(nums(v)?),
                _ => return Err(bad("unknown key")),
            }
        }
        Ok(TransformSpec {
            mode: mode.ok_or_else(|| bad("missing mode"))?,
            region: region.ok_or_else(|| bad("missing region"))?,
            directions: directions.ok_or_else(|| bad("missing dirs"))?,
            permutation: permutation.ok_or_else(|| bad("missing perm"))?,
        })
    }
}

/// Uniform over all permutations of `0..n` except the identity (when `n > 1`).
fn random_non_identity_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if n < 2 || perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Draws and applies one patch anomaly according to `policy`.
pub fn apply_patch_anomaly<R: Rng + ?Sized>(
    cuboid: FrameCuboid,
    rng: &mut R,
    policy: TransformPolicy,
    patch: &PatchConfig,
) -> Result<(FrameCuboid, TransformSpec)> {
    let n = cuboid.frames;
    let mut spec = TransformSpec::identity(n);
    if policy == TransformPolicy::Baseline {
        return Ok((cuboid, spec));
    }
    let region = sample_patch_region(rng, cuboid.height, cuboid.width, patch)?;
    spec.region = Some(region);
    let independent = |rng: &mut R| (0..n).map(|_| Rotation::random(rng)).collect::<Vec<_>>();
    match policy {
        TransformPolicy::Baseline => unreachable!(),
        TransformPolicy::TmtOnly => {
            spec.mode = TransformMode::Tmt;
            spec.permutation = random_non_identity_permutation(rng, n);
        }
        TransformPolicy::SrtOnly => {
            spec.mode = TransformMode::Srt;
            spec.directions = independent(rng);
        }
        TransformPolicy::TmtOrSrt | TransformPolicy::TmtOrSrtChunk => {
            if rng.random_bool(0.5) {
                spec.mode = TransformMode::Tmt;
                spec.permutation = random_non_identity_permutation(rng, n);
            } else {
                spec.mode = TransformMode::Srt;
                spec.directions = if policy == TransformPolicy::TmtOrSrtChunk {
                    vec![Rotation::random(rng); n]
                } else {
                    independent(rng)
                };
            }
        }
        TransformPolicy::TmtAndSrt => {
            spec.mode = TransformMode::Both;
            spec.permutation = random_non_identity_permutation(rng, n);
            spec.directions = independent(rng);
        }
    }
    let out = spec.replay(cuboid)?;
    Ok((out, spec))
}

/// Upper bound of the per-cuboid noise standard deviation.
pub const MAX_NOISE_SIGMA: f64 = 0.03;

/// Adds i.i.d. Gaussian noise with `σ ~ U[0, 0.03]` drawn once per cuboid.
/// Returns the cuboid and the drawn `σ`. Values are not re-clamped.
pub fn add_gaussian_noise<R: Rng + ?Sized>(cuboid: FrameCuboid, rng: &mut R) -> (FrameCuboid, f64) {
    let sigma = rng.random_range(0.0..=MAX_NOISE_SIGMA);
    (add_noise_with_sigma(cuboid, rng, sigma), sigma)
}

pub fn add_noise_with_sigma<R: Rng + ?Sized>(mut cuboid: FrameCuboid, rng: &mut R, sigma: f64) -> FrameCuboid {
    bump(|c| c.noise_calls += 1);
    if sigma == 0.0 {
        return cuboid;
    }
    for v in &mut cuboid.data {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sigma * z) as f32;
    }
    cuboid
}
