//! Metric implementations against direct 64-bit formulas.

use fastano::losses::{normality_scores, psnr, ssim, ssim_loss, SsimConstants};
use fastano::metrics::roc_auc;
use fastano::tensor::Tape;
use rand::Rng;

use super::{pairwise_auc, rng, tensor, uniform};

/// Scores drawn from a handful of levels so ties are common.
pub fn tied_instance(r: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = r.random_range(2..=300);
        let levels = r.random_range(1..=12);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.7) as u8).collect();
        let has_tie = (1..n).any(|i| scores[..i].contains(&scores[i]));
        if labels.contains(&0) && labels.contains(&1) && has_tie {
            return (scores, labels);
        }
    }
}

/// Largest deviation of `roc_auc` from the pairwise definition.
pub fn auc_vs_pairwise(instances: usize) -> f64 {
    let mut r = rng(301);
    (0..instances)
        .map(|_| {
            let (s, l) = tied_instance(&mut r);
            (roc_auc(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn ssim_direct(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Largest deviation of the taped SSIM loss and the standalone SSIM from the formula.
pub fn ssim_vs_direct(instances: usize) -> f64 {
    let mut r = rng(302);
    let c = SsimConstants::default();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (h, w) = (r.random_range(1..=24), r.random_range(1..=24));
        let x = uniform(&mut r, h * w, -1.0, 1.0);
        let mix: f64 = r.random_range(0.0..1.0);
        let y: Vec<f64> = x.iter().map(|&v| (mix * v + (1.0 - mix) * r.random_range(-1.0..1.0)).clamp(-1.0, 1.0)).collect();
        let want = ssim_direct(&x, &y, c.c1, c.c2);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.leaf(tensor(&[1, 1, 1, h, w], x.clone())), tape.leaf(tensor(&[1, 1, 1, h, w], y.clone())));
        let l = ssim_loss(&mut tape, xv, yv, c).unwrap();
        worst = worst.max((tape.value(l).item() - (1.0 - want)).abs());
        worst = worst.max((ssim(&x, &y, c).unwrap() - want).abs());
    }
    worst
}

pub fn psnr_direct(pred: &[f32], target: &[f32]) -> f64 {
    let n = pred.len() as f64;
    let mse = pred.iter().zip(target).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    let peak = pred.iter().map(|&v| v as f64).fold(f64::MIN, f64::max);
    10.0 * (peak / mse).log10()
}

pub fn psnr_vs_direct(instances: usize) -> f64 {
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(1..=500);
        let target: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let mut pred: Vec<f32> = target.iter().map(|&t| t + r.random_range(-0.3f32..0.3)).collect();
        pred[0] = r.random_range(0.1f32..1.0);
        worst = worst.max((psnr(&pred, &target).unwrap() - psnr_direct(&pred, &target)).abs());
    }
    worst
}

/// Builds PSNR sequences from chosen normalized values (containing 0 and 1)
/// and an arbitrary affine map; the scores must recover those values.
pub fn normality_by_construction(instances: usize) -> f64 {
    let mut r = rng(304);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(2..=200);
        let mut want = uniform(&mut r, n, 0.0, 1.0);
        let (i, j) = (r.random_range(0..n), r.random_range(0..n));
        want[i] = 0.0;
        if j != i {
            want[j] = 1.0;
        } else {
            want[(i + 1) % n] = 1.0;
        }
        let lo: f64 = r.random_range(5.0..30.0);
        let span: f64 = r.random_range(0.5..20.0);
        let psnrs: Vec<f64> = want.iter().map(|&s| lo + s * span).collect();
        let got = normality_scores(&psnrs).unwrap();
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}
