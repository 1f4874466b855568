//! Frame-level evaluation: ROC-AUC, score gap, and the score/metrics files.
//!
//! Labels follow the normality convention: `1` = normal, `0` = abnormal, and
//! normal frames are expected to score high.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {bad} is neither 0 nor 1")));
    }
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve of `scores` against `labels`, by a trapezoidal
/// sweep over distinct thresholds. Tied scores form one ROC segment, which
/// makes the area equal to `P(normal > abnormal) + ½·P(tie)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {s} is not comparable")));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // twice the area, in units of 1/(pos·neg): exact integer arithmetic
    let mut doubled: u128 = 0;
    let (mut tp, mut i) = (0u64, 0usize);
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        doubled += dfp as u128 * (2 * tp as u128 + dtp as u128);
        tp += dtp;
    }
    Ok(doubled as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Mean normal-frame score minus mean abnormal-frame score.
pub fn score_gap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = class_counts(labels)?;
    let (mut sn, mut sa) = (0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            sn += s;
        } else {
            sa += s;
        }
    }
    Ok(sn / pos as f64 - sa / neg as f64)
}

/// Scored frames of one test clip. Index `i` of every vector refers to
/// frame `frame_index[i]` of the clip; the first `skip` frames have no
/// prediction and are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScores {
    pub clip_id: String,
    pub skip: usize,
    pub frame_index: Vec<usize>,
    pub psnr: Vec<f64>,
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl ClipScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores and labels of all labelled clips, concatenated in clip order.
pub fn concatenate(clips: &[ClipScores]) -> Option<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for c in clips {
        scores.extend_from_slice(&c.scores);
        labels.extend_from_slice(c.labels.as_ref()?);
    }
    Some((scores, labels))
}

/// Provenance stamped into every emitted artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("seed={} config_digest={}", self.seed, self.config_digest)
    }
}

pub const CSV_HEADER: &str = "clip_id,frame_index,psnr,s_t,label";

/// `clip_id,frame_index,psnr,s_t,label`, preceded by a `#` provenance line.
/// Unlabelled frames leave the label column empty.
pub fn scores_csv(clips: &[ClipScores], prov: &Provenance) -> String {
    let mut out = format!("# {}\n{CSV_HEADER}\n", prov.comment());
    for c in clips {
        for i in 0..c.len() {
            let label = c.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            let _ = writeln!(out, "{},{},{},{},{}", c.clip_id, c.frame_index[i], c.psnr[i], c.scores[i], label);
        }
    }
    out
}

/// Parses [`scores_csv`] output back into clips (in first-appearance order)
/// and the provenance line, if present. Errors carry the 1-based line number.
pub fn parse_scores_csv(text: &str) -> Result<(Vec<ClipScores>, Option<String>)> {
    let mut clips: Vec<ClipScores> = Vec::new();
    let mut provenance = None;
    let mut saw_header = false;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let bad = |msg: &str| Error::format(format!("scores csv line {lineno}"), msg.to_string());
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            provenance.get_or_insert_with(|| c.trim().to_string());
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(bad(&format!("expected header `{CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(&format!("expected 5 columns, found {}", cols.len())));
        }
        let frame: usize = cols[1].parse().map_err(|_| bad("bad frame_index"))?;
        let psnr: f64 = cols[2].parse().map_err(|_| bad("bad psnr"))?;
        let s: f64 = cols[3].parse().map_err(|_| bad("bad s_t"))?;
        let label: Option<u8> = match cols[4] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(bad("label must be 0, 1 or empty")),
        };
        let idx = match clips.iter().position(|c| c.clip_id == cols[0]) {
            Some(i) => i,
            None => {
                clips.push(ClipScores {
                    clip_id: cols[0].to_string(),
                    skip: frame,
                    frame_index: vec![],
                    psnr: vec![],
                    scores: vec![],
                    labels: label.map(|_| vec![]),
                });
                clips.len() - 1
            }
        };
        let c = &mut clips[idx];
        c.frame_index.push(frame);
        c.psnr.push(psnr);
        c.scores.push(s);
        match (c.labels.as_mut(), label) {
            (Some(l), Some(v)) => l.push(v),
            (None, None) => {}
            _ => return Err(bad("clip mixes labelled and unlabelled rows")),
        }
    }
    if !saw_header {
        return Err(Error::format("scores csv", "missing header"));
    }
    Ok((clips, provenance))
}

/// Flat `key=value` metrics file, keys sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsFile {
    pub entries: BTreeMap<String, String>,
}

impl MetricsFile {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = MetricsFile::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("metrics line {}", n + 1), "missing `=`"))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
