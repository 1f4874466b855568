//! Prediction objective and PSNR-based normality scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Weights of the pixel (L1) and structural (SSIM) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub structural: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 0.25,
            structural: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel >= 0.0) {
            return Err(Error::config("loss_weights.pixel", "must be non-negative"));
        }
        if !(self.structural >= 0.0) {
            return Err(Error::config("loss_weights.structural", "must be non-negative"));
        }
        Ok(())
    }
}

/// SSIM stabilizers `c1 = (0.01·L)²`, `c2 = (0.03·L)²` for dynamic range `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn for_range(dynamic_range: f64) -> Self {
        SsimConstants {
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
        }
    }
}

impl Default for SsimConstants {
    /// Frames live in `[-1, 1]`, so `L = 2`.
    fn default() -> Self {
        Self::for_range(2.0)
    }
}

pub fn l1_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    tape.l1_loss(pred, target)
}

pub fn ssim_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var, consts: SsimConstants) -> Result<Var> {
    tape.ssim_loss(pred, target, consts.c1, consts.c2)
}

/// `ω_p · L1 + ω_f · (1 - SSIM)`.
pub fn prediction_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    weights: LossWeights,
    consts: SsimConstants,
) -> Result<Var> {
    let lp = l1_loss(tape, pred, target)?;
    let lf = ssim_loss(tape, pred, target, consts)?;
    let a = tape.scale(lp, T::lit(weights.pixel));
    let b = tape.scale(lf, T::lit(weights.structural));
    tape.add(a, b)
}

/// Whole-frame SSIM outside any tape, for reporting.
pub fn ssim<T: Element>(pred: &[T], target: &[T], consts: SsimConstants) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "ssim on {} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    Ok(crate::tensor::tape_ssim_value(pred, target, consts.c1, consts.c2))
}

/// `10·log10(max(pred) / MSE)`; the peak is the prediction's own maximum.
pub fn psnr(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "psnr on {} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Err(Error::PerfectPrediction);
    }
    let peak = pred.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    if !(peak > 0.0) {
        return Err(Error::DegeneratePeak(peak));
    }
    Ok(10.0 * (peak / mse).log10())
}

/// Outcome of scoring one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FramePsnr {
    Finite(f64),
    /// Zero error; takes the clip's best finite PSNR.
    Perfect,
    /// Non-positive prediction peak; takes the clip's worst finite PSNR.
    Degenerate,
}

impl FramePsnr {
    pub fn measure(pred: &[f32], target: &[f32]) -> Result<Self> {
        match psnr(pred, target) {
            Ok(v) => Ok(FramePsnr::Finite(v)),
            Err(Error::PerfectPrediction) => Ok(FramePsnr::Perfect),
            Err(Error::DegeneratePeak(_)) => Ok(FramePsnr::Degenerate),
            Err(e) => Err(e),
        }
    }
}

/// Replaces the non-finite outcomes of one clip with its finite extremes.
/// A clip with no finite value resolves to all zeros (constant).
pub fn resolve_clip_psnrs(raw: &[FramePsnr]) -> Vec<f64> {
    let finite = raw.iter().filter_map(|p| match p {
        FramePsnr::Finite(v) => Some(*v),
        _ => None,
    });
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    raw.iter()
        .map(|p| match p {
            FramePsnr::Finite(v) => *v,
            FramePsnr::Perfect => hi,
            FramePsnr::Degenerate => lo,
        })
        .collect()
}

/// Per-clip min-max normalization to `[0, 1]`; a constant clip maps to 0.5.
pub fn normality_scores(psnrs: &[f64]) -> Result<Vec<f64>> {
    if psnrs.is_empty() {
        return Err(Error::Invalid("normality scores of an empty clip".into()));
    }
    let lo = psnrs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psnrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.5; psnrs.len()]);
    }
    Ok(psnrs.iter().map(|&p| (p - lo) / (hi - lo)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair(tape: &mut Tape<f64>, a: Vec<f64>, b: Vec<f64>) -> (Var, Var) {
        let n = a.len();
        (
            tape.leaf(Tensor::new(&[n], a).unwrap()),
            tape.leaf(Tensor::new(&[n], b).unwrap()),
        )
    }

    #[test]
    fn identical_frames_have_zero_loss() {
        let mut tape = Tape::new();
        let v = vec![0.1, -0.4, 0.9, 0.3];
        let (p, t) = pair(&mut tape, v.clone(), v);
        let l = l1_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let s = ssim_loss(&mut tape, p, t, SsimConstants::default()).unwrap();
        assert!(tape.value(s).item().abs() < 1e-9);
        let total = prediction_loss(&mut tape, p, t, LossWeights::default(), SsimConstants::default()).unwrap();
        assert!(tape.value(total).item().abs() < 1e-9);
    }

    #[test]
    fn uniform_offset_l1() {
        let mut tape = Tape::new();
        let (p, t) = pair(&mut tape, vec![0.5, 0.0, -0.5], vec![0.0, -0.5, -1.0]);
        let l = l1_loss(&mut tape, p, t).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(l1_loss(&mut tape, a, b).is_err());
        assert!(ssim_loss(&mut tape, a, b, SsimConstants::default()).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut tape = Tape::new();
        let (a, b) = pair(&mut tape, vec![0.1, 0.7, -0.2, 0.4], vec![0.3, -0.1, 0.0, 0.9]);
        let ab = ssim_loss(&mut tape, a, b, SsimConstants::default()).unwrap();
        let ba = ssim_loss(&mut tape, b, a, SsimConstants::default()).unwrap();
        assert_eq!(tape.value(ab).item(), tape.value(ba).item());
    }

    #[test]
    fn degenerate_weights_reduce_to_l1() {
        let mut tape = Tape::new();
        let (p, t) = pair(&mut tape, vec![0.1, 0.7, -0.2], vec![0.3, -0.1, 0.0]);
        let w = LossWeights { pixel: 1.0, structural: 0.0 };
        let total = prediction_loss(&mut tape, p, t, w, SsimConstants::default()).unwrap();
        let l1 = l1_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(l1).item());
    }

    #[test]
    fn psnr_twenty_db() {
        let pred = vec![1.0f32, 0.5, 0.2, 0.7];
        let target: Vec<f32> = pred.iter().map(|v| v - 0.1).collect();
        let v = psnr(&pred, &target).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn doubling_mse_costs_ten_log_two() {
        let pred = vec![1.0f32, 0.0, 0.0, 0.0];
        let t1 = vec![1.0f32, 0.1, 0.0, 0.0];
        let t2 = vec![1.0f32, 0.1, 0.1, 0.0];
        let d = psnr(&pred, &t1).unwrap() - psnr(&pred, &t2).unwrap();
        assert!((d - 10.0 * 2f64.log10()).abs() < 1e-6, "{d}");
    }

    #[test]
    fn psnr_error_paths() {
        assert!(matches!(psnr(&[0.3, 0.2], &[0.3, 0.2]), Err(Error::PerfectPrediction)));
        assert!(matches!(psnr(&[-0.3, -0.2], &[0.3, 0.2]), Err(Error::DegeneratePeak(_))));
    }

    #[test]
    fn clip_resolution_uses_finite_extremes() {
        let raw = [FramePsnr::Finite(10.0), FramePsnr::Perfect, FramePsnr::Degenerate, FramePsnr::Finite(30.0)];
        assert_eq!(resolve_clip_psnrs(&raw), vec![10.0, 30.0, 10.0, 30.0]);
        assert_eq!(resolve_clip_psnrs(&[FramePsnr::Perfect, FramePsnr::Perfect]), vec![0.0, 0.0]);
    }

    #[test]
    fn normality_affine_cases() {
        assert_eq!(normality_scores(&[10.0, 20.0, 30.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normality_scores(&[7.0, 7.0, 7.0]).unwrap(), vec![0.5; 3]);
        assert!(normality_scores(&[]).is_err());
    }

    #[test]
    fn normality_shift_invariant() {
        let base = [12.5, 31.0, 18.25, 22.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 4.0).collect();
        assert_eq!(normality_scores(&base).unwrap(), normality_scores(&shifted).unwrap());
    }
}
