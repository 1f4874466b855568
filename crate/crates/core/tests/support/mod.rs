//! Independent reference implementations used as test oracles. None of them
//! share code with the library kernels.
#![allow(dead_code)]

pub mod archsuite;
pub mod gradsuite;
pub mod metricsuite;
pub mod transformsuite;

use fastano::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, uniform(rng, n, -1.0, 1.0))
}

/// Direct six-fold loop cross-correlation over `[B, Ci, D, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut y = vec![0.0; b * co * od * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for i in 0..ci {
                            for a in 0..kd {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let zz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let rr = (r * stride[1] + p) as isize - pad[1] as isize;
                                        let cc = (c * stride[2] + q) as isize - pad[2] as isize;
                                        if zz < 0 || rr < 0 || cc < 0 || zz >= d as isize || rr >= h as isize || cc >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * ci + i) * d + zz as usize) * h + rr as usize) * wd + cc as usize;
                                        let wi = (((o * ci + i) * kd + a) * kh + p) * kw + q;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[(((n * co + o) * od + z) * oh + r) * ow + c] = acc;
                    }
                }
            }
        }
    }
    (y, [b, co, od, oh, ow])
}

/// Transposed convolution by its scatter definition: input voxel `i`
/// adds `x[i]·w[a]` to output position `i·s + a − p`. Weight is `[Ci, Co, k...]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_deconv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    out_pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, ci, d, h, wd] = xs;
    let [_, co, kd, kh, kw] = ws;
    let od = (d - 1) * stride[0] + kd + out_pad[0] - 2 * pad[0];
    let oh = (h - 1) * stride[1] + kh + out_pad[1] - 2 * pad[1];
    let ow = (wd - 1) * stride[2] + kw + out_pad[2] - 2 * pad[2];
    let mut y = vec![0.0; b * co * od * oh * ow];
    for n in 0..b {
        for o in 0..co {
            let base = (n * co + o) * od * oh * ow;
            if let Some(bb) = bias {
                y[base..base + od * oh * ow].iter_mut().for_each(|v| *v = bb[o]);
            }
        }
        for i in 0..ci {
            for z in 0..d {
                for r in 0..h {
                    for c in 0..wd {
                        let xv = x[(((n * ci + i) * d + z) * h + r) * wd + c];
                        for o in 0..co {
                            for a in 0..kd {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let zz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let rr = (r * stride[1] + p) as isize - pad[1] as isize;
                                        let cc = (c * stride[2] + q) as isize - pad[2] as isize;
                                        if zz < 0 || rr < 0 || cc < 0 || zz >= od as isize || rr >= oh as isize || cc >= ow as isize {
                                            continue;
                                        }
                                        let wi = (((i * co + o) * kd + a) * kh + p) * kw + q;
                                        y[(((n * co + o) * od + zz as usize) * oh + rr as usize) * ow + cc as usize] += xv * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, [b, co, od, oh, ow])
}

/// Mann–Whitney form of the AUC: fraction of (normal, abnormal) pairs in
/// which the normal frame scores higher, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Bilinear sample at one destination pixel, written out from the formula
/// `src = (dst + 0.5)·in/out − 0.5`, clamped.
pub fn bilinear_at(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize, y: usize, x: usize) -> f64 {
    let sy = ((y as f64 + 0.5) * in_h as f64 / out_h as f64 - 0.5).max(0.0).min((in_h - 1) as f64);
    let sx = ((x as f64 + 0.5) * in_w as f64 / out_w as f64 - 0.5).max(0.0).min((in_w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(in_h - 1), (x0 + 1).min(in_w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |r: usize, c: usize| src[r * in_w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Central-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor on the denominator, so that gradients
/// indistinguishable from zero at the FD noise level are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Builds a scalar on a fresh tape from `inputs` (recorded as leaves, in order).
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Compares backward gradients of every input against central differences.
/// Up to `max_coords` coordinates per input are checked, chosen at random.
/// Returns the worst relative error.
pub fn grad_check(inputs: &[Tensor<f64>], graph: &Graph<'_>, rng: &mut impl Rng, max_coords: usize) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let loss = graph(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = graph(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

/// `sum(out ⊙ r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output element with a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Var {
    let rv = tape.leaf(r.clone());
    let m = tape.mul(out, rv).unwrap();
    tape.sum(m)
}
