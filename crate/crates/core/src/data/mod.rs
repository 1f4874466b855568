//! Frame ingestion, preprocessing, sliding windows and the on-disk dataset
//! layout.
//!
//! ```text
//! <root>/train/<clip>/<frame%05d>.pgm
//! <root>/test/<clip>/<frame%05d>.pgm
//! <root>/test/<clip>/labels.txt      one 0/1 per frame, 1 = normal
//! ```
//! Clips and frames are discovered in lexicographic order.

pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

pub use pnm::{decode_pnm, encode_pgm, read_pnm, rgb_to_gray, write_pgm, GrayImage};
pub use synth::{synth_generate, AnomalyKind, SyntheticClip, SyntheticCorpus, SyntheticSceneConfig};

use crate::error::{Error, Result};
use crate::transform::{Frame, FrameCuboid};

/// Bilinear resample without corner alignment: destination pixel `d` reads
/// source coordinate `(d + 0.5)·in/out − 0.5`, clamped to the valid range.
pub fn resize_bilinear(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize {in_h}x{in_w} to {out_h}x{out_w}")));
    }
    if src.len() != in_h * in_w {
        return Err(Error::Shape(format!("{} values for a {in_h}x{in_w} image", src.len())));
    }
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(src.to_vec());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * in_w + x0] * (1.0 - fx) + src[y0 * in_w + x1] * fx;
            let bot = src[y1 * in_w + x0] * (1.0 - fx) + src[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Resize to `height × width`, then map `v ↦ v/127.5 − 1` into `[-1, 1]`.
pub fn preprocess(img: &GrayImage, height: usize, width: usize) -> Result<Frame> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::Shape("zero-sized frame".into()));
    }
    let raw: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let resized = resize_bilinear(&raw, img.height, img.width, height, width)?;
    let data = resized.iter().map(|&v| ((v / 127.5 - 1.0) as f32).clamp(-1.0, 1.0)).collect();
    Frame::new(height, width, data)
}

/// `(first input frame, target frame)` of every window of `n` frames in a
/// clip of `len` frames: `(k, k + n)` for `k in 0..len - n`.
pub fn window_indices(len: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || len < n + 1 {
        return Err(Error::Invalid(format!(
            "clip of {len} frames is too short for windows of {n} plus a target"
        )));
    }
    Ok((0..len - n).map(|k| (k, k + n)).collect())
}

/// Window `k` stacks frames `k..k+n` and targets frame `k+n`.
pub fn sliding_windows(frames: &[Frame], n: usize) -> Result<Vec<(FrameCuboid, Frame)>> {
    window_indices(frames.len(), n)?
        .into_iter()
        .map(|(k, t)| {
            let refs: Vec<&Frame> = frames[k..t].iter().collect();
            Ok((FrameCuboid::from_frames(&refs, n)?, frames[t].clone()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipManifest {
    pub id: String,
    pub frames: Vec<PathBuf>,
    /// Test clips only; `1` = normal.
    pub labels: Option<Vec<u8>>,
}

impl ClipManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<ClipManifest>,
    pub test: Vec<ClipManifest>,
}

pub const LABELS_FILE: &str = "labels.txt";

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_frame(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::format(
                format!("{} line {}", path.display(), i + 1),
                format!("label `{other}` is not 0 or 1"),
            )),
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn discover_split(dir: &Path, labelled: bool) -> Result<Vec<ClipManifest>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut clips = Vec::new();
    for clip_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let frames: Vec<PathBuf> = sorted_entries(&clip_dir)?.into_iter().filter(|p| is_frame(p)).collect();
        let id = clip_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let label_path = clip_dir.join(LABELS_FILE);
        let labels = if labelled && label_path.is_file() {
            let l = read_labels(&label_path)?;
            if l.len() != frames.len() {
                return Err(Error::format(
                    label_path.display().to_string(),
                    format!("{} labels for {} frames", l.len(), frames.len()),
                ));
            }
            Some(l)
        } else {
            None
        };
        clips.push(ClipManifest { id, frames, labels });
    }
    Ok(clips)
}

/// Scans `<root>/train` and `<root>/test`.
pub fn discover(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        train: discover_split(&root.join("train"), false)?,
        test: discover_split(&root.join("test"), true)?,
    })
}

/// Reads every frame of a clip in manifest order. All frames must share
/// one size.
pub fn load_clip(manifest: &ClipManifest) -> Result<Vec<GrayImage>> {
    let mut out: Vec<GrayImage> = Vec::with_capacity(manifest.frames.len());
    for path in &manifest.frames {
        let img = read_pnm(path)?;
        if let Some(first) = out.first() {
            if (img.height, img.width) != (first.height, first.width) {
                return Err(Error::format(
                    path.display().to_string(),
                    format!(
                        "frame is {}x{}, clip `{}` started at {}x{}",
                        img.height, img.width, manifest.id, first.height, first.width
                    ),
                ));
            }
        }
        out.push(img);
    }
    Ok(out)
}

/// Loads and preprocesses a clip to model frames.
pub fn load_frames(manifest: &ClipManifest, height: usize, width: usize) -> Result<Vec<Frame>> {
    load_clip(manifest)?.iter().map(|img| preprocess(img, height, width)).collect()
}

/// Writes one clip directory (`00000.pgm`, ...; plus labels when given).
pub fn write_clip(dir: &Path, frames: &[GrayImage], labels: Option<&[u8]>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&dir.join(format!("{i:05}.pgm")), f)?;
    }
    if let Some(l) = labels {
        write_labels(&dir.join(LABELS_FILE), l)?;
    }
    Ok(())
}
