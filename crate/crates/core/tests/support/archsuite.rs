//! Shape and capacity checks on the full-size default model.

use fastano::model::{Autoencoder, ModelConfig, StepOptions};
use fastano::tensor::Tensor;

/// Smooth moving blobs in `[-1, 1]`: `frames` consecutive frames of `h × w`.
pub fn blob_frames(frames: usize, h: usize, w: usize, phase: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames * h * w);
    for t in 0..frames {
        let cx = w as f64 * (0.3 + 0.05 * (t as f64 + phase));
        let cy = h as f64 * 0.5;
        for y in 0..h {
            for x in 0..w {
                let d2 = ((x as f64 - cx) / (0.08 * w as f64)).powi(2) + ((y as f64 - cy) / (0.12 * h as f64)).powi(2);
                let tex = 0.15 * ((x as f64 * 0.21).sin() + (y as f64 * 0.13).cos());
                out.push(((-d2).exp() * 1.2 - 0.4 + tex).clamp(-1.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn default_model(seed: u64) -> Autoencoder<f32> {
    Autoencoder::build(ModelConfig::default(), &mut fastano::rng::from_seed(seed)).unwrap()
}

pub fn param_count() -> usize {
    default_model(0).param_count()
}

/// `[B,1,5,240,360] → [B,1,1,240,360]` for the batch sizes given.
pub fn forward_shapes(batches: &[usize]) -> Result<(), String> {
    let m = default_model(0);
    for &b in batches {
        let x = Tensor::new(&[b, 1, 5, 240, 360], blob_frames(5 * b, 240, 360, 0.0)).unwrap();
        let y = m.predict(&x).map_err(|e| e.to_string())?;
        if y.shape() != [b, 1, 1, 240, 360] {
            return Err(format!("batch {b}: output shape {:?}", y.shape()));
        }
        if !y.data().iter().all(|v| v.is_finite()) {
            return Err(format!("batch {b}: non-finite output"));
        }
    }
    Ok(())
}

/// Losses of `steps` consecutive updates on one fixed (window, target) pair.
pub fn overfit_losses(steps: usize) -> Vec<f64> {
    let mut m = default_model(0);
    let clip = blob_frames(6, 240, 360, 0.0);
    let x = Tensor::new(&[1, 1, 5, 240, 360], clip[..5 * 240 * 360].to_vec()).unwrap();
    let y = Tensor::new(&[1, 1, 1, 240, 360], clip[5 * 240 * 360..].to_vec()).unwrap();
    let opts = StepOptions::default();
    let mut losses: Vec<f64> = (0..steps).map(|_| m.train_step(&x, &y, 2e-4, &opts).unwrap()).collect();
    losses.push(m.loss(&x, &y, &opts).unwrap());
    losses
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[1] < p[0])
}
