//! Finite-difference gradient checks, one function per differentiable op.
//! Each returns the worst relative error over `instances` random cases.

use fastano::losses::{prediction_loss, LossWeights, SsimConstants};
use fastano::model::{Autoencoder, ModelConfig, StepOptions};
use fastano::tensor::{Activation, BatchNormMode, ConvGeom, RunningStats, Tape, Tensor};
use rand::Rng;

use super::{grad_check, naive_conv3d, naive_deconv3d, project, random_tensor, rel_err, rng, tensor, uniform, FD_STEP};

const COORDS: usize = 24;

fn conv_case(r: &mut impl Rng) -> ([usize; 5], [usize; 5], ConvGeom) {
    loop {
        let b = r.random_range(1..=2);
        let ci = r.random_range(1..=3);
        let co = r.random_range(1..=3);
        let k: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=3));
        let s: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=2));
        let p: [usize; 3] = std::array::from_fn(|a| r.random_range(0..k[a]));
        let d: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=5));
        if (0..3).all(|a| d[a] + 2 * p[a] >= k[a]) {
            return ([b, ci, d[0], d[1], d[2]], [co, ci, k[0], k[1], k[2]], ConvGeom::new(s, p));
        }
    }
}

fn deconv_case(r: &mut impl Rng) -> ([usize; 5], [usize; 5], ConvGeom) {
    loop {
        let b = r.random_range(1..=2);
        let ci = r.random_range(1..=3);
        let co = r.random_range(1..=3);
        let k: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=3));
        let s: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=2));
        let p: [usize; 3] = std::array::from_fn(|a| r.random_range(0..k[a]));
        let op: [usize; 3] = std::array::from_fn(|a| r.random_range(0..s[a]));
        let d: [usize; 3] = std::array::from_fn(|_| r.random_range(1..=4));
        if (0..3).all(|a| (d[a] - 1) * s[a] + k[a] + op[a] > 2 * p[a]) {
            return (
                [b, ci, d[0], d[1], d[2]],
                [ci, co, k[0], k[1], k[2]],
                ConvGeom::new(s, p).with_output_padding(op),
            );
        }
    }
}

pub fn conv3d(instances: usize) -> f64 {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (xs, ws, geom) = conv_case(&mut r);
        let x = random_tensor(&mut r, &xs);
        let w = random_tensor(&mut r, &ws);
        let b = random_tensor(&mut r, &[ws[0]]);
        let (_, ys) = naive_conv3d(x.data(), xs, w.data(), ws, None, geom.stride, geom.padding);
        let proj = random_tensor(&mut r, &ys);
        let g = |t: &mut Tape<f64>, v: &[fastano::tensor::Var]| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), geom).unwrap();
            project(t, y, &proj)
        };
        worst = worst.max(grad_check(&[x, w, b], &g, &mut r, COORDS));
    }
    worst
}

pub fn deconv3d(instances: usize) -> f64 {
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (xs, ws, geom) = deconv_case(&mut r);
        let x = random_tensor(&mut r, &xs);
        let w = random_tensor(&mut r, &ws);
        let b = random_tensor(&mut r, &[ws[1]]);
        let (_, ys) = naive_deconv3d(x.data(), xs, w.data(), ws, None, geom.stride, geom.padding, geom.output_padding);
        let proj = random_tensor(&mut r, &ys);
        let g = |t: &mut Tape<f64>, v: &[fastano::tensor::Var]| {
            let y = t.deconv3d(v[0], v[1], Some(v[2]), geom).unwrap();
            project(t, y, &proj)
        };
        worst = worst.max(grad_check(&[x, w, b], &g, &mut r, COORDS));
    }
    worst
}

pub fn batchnorm3d(instances: usize, mode: BatchNormMode) -> f64 {
    let mut r = rng(103 + mode as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let shape = [
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(2..=3),
        ];
        let c = shape[1];
        let x = random_tensor(&mut r, &shape);
        let gamma = tensor(&[c], uniform(&mut r, c, 0.5, 1.5));
        let beta = random_tensor(&mut r, &[c]);
        let running = RunningStats {
            mean: uniform(&mut r, c, -0.5, 0.5),
            var: uniform(&mut r, c, 0.5, 2.0),
        };
        let proj = random_tensor(&mut r, &shape);
        let g = |t: &mut Tape<f64>, v: &[fastano::tensor::Var]| {
            let mut stats = running.clone();
            let y = t.batchnorm3d(v[0], v[1], v[2], &mut stats, mode, 0.1, 1e-5).unwrap();
            project(t, y, &proj)
        };
        worst = worst.max(grad_check(&[x, gamma, beta], &g, &mut r, COORDS));
    }
    worst
}

pub fn activations(instances: usize) -> f64 {
    let mut r = rng(105);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let kind = if i % 2 == 0 {
            Activation::Relu
        } else {
            Activation::LeakyRelu(r.random_range(0.01..0.5))
        };
        let n = r.random_range(4..40);
        // keep clear of the kink so the central difference never straddles it
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.random_range(0.05..1.0);
                if r.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = tensor(&[n], data);
        let proj = random_tensor(&mut r, &[n]);
        let g = |t: &mut Tape<f64>, v: &[fastano::tensor::Var]| {
            let y = t.activation(v[0], kind);
            project(t, y, &proj)
        };
        worst = worst.max(grad_check(&[x], &g, &mut r, COORDS));
    }
    worst
}

fn frame_pair(r: &mut impl Rng) -> (Tensor<f64>, Tensor<f64>) {
    let shape = [r.random_range(1..=3), 1, 1, r.random_range(2..=6), r.random_range(2..=6)];
    let n: usize = shape.iter().product();
    let target = uniform(r, n, -1.0, 1.0);
    let pred = target
        .iter()
        .map(|&t| {
            let d: f64 = r.random_range(0.05..0.6);
            if r.random_bool(0.5) { t + d } else { t - d }
        })
        .collect();
    (tensor(&shape, pred), tensor(&shape, target))
}

pub fn l1(instances: usize) -> f64 {
    let mut r = rng(106);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, t) = frame_pair(&mut r);
        let g = |tp: &mut Tape<f64>, v: &[fastano::tensor::Var]| tp.l1_loss(v[0], v[1]).unwrap();
        worst = worst.max(grad_check(&[p, t], &g, &mut r, COORDS));
    }
    worst
}

pub fn ssim(instances: usize) -> f64 {
    let mut r = rng(107);
    let mut worst: f64 = 0.0;
    let c = SsimConstants::default();
    for _ in 0..instances {
        let (p, t) = frame_pair(&mut r);
        let g = |tp: &mut Tape<f64>, v: &[fastano::tensor::Var]| tp.ssim_loss(v[0], v[1], c.c1, c.c2).unwrap();
        worst = worst.max(grad_check(&[p, t], &g, &mut r, COORDS));
    }
    worst
}

pub fn prediction(instances: usize) -> f64 {
    let mut r = rng(108);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, t) = frame_pair(&mut r);
        let w = LossWeights {
            pixel: r.random_range(0.0..1.0),
            structural: r.random_range(0.0..1.0),
        };
        let g = |tp: &mut Tape<f64>, v: &[fastano::tensor::Var]| {
            prediction_loss(tp, v[0], v[1], w, SsimConstants::default()).unwrap()
        };
        worst = worst.max(grad_check(&[p, t], &g, &mut r, COORDS));
    }
    worst
}

/// Full autoencoder plus objective, gradients w.r.t. parameters and input.
pub fn model(instances: usize) -> f64 {
    let mut r = rng(109);
    let mut worst: f64 = 0.0;
    let opts = StepOptions::default();
    for i in 0..instances {
        let b = r.random_range(1..=2);
        // the innermost normalization sees b·(h/8)·(w/8) values per channel;
        // with a single value its output is exactly beta, a nonsmooth point
        let (h, w) = if b == 1 { (8, 16) } else { (8 * r.random_range(1..=2), 8 * r.random_range(1..=2)) };
        let cfg = ModelConfig {
            frame_height: h,
            frame_width: w,
            widths: [r.random_range(1..=3), r.random_range(2..=3), r.random_range(2..=4)],
            ..ModelConfig::default()
        };
        let mut m = Autoencoder::<f64>::build(cfg.clone(), &mut rng(1000 + i as u64)).unwrap();
        // move gamma/beta off their initial values so no activation input sits at zero
        let norm_paths: Vec<String> =
            m.params().iter().map(|(p, _)| p.to_string()).filter(|p| p.contains(".bn.")).collect();
        for path in &norm_paths {
            for v in m.params_mut().get_mut(path).unwrap().data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let x = random_tensor(&mut r, &m.input_shape(b));
        let y = random_tensor(&mut r, &[b, 1, 1, cfg.frame_height, cfg.frame_width]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let yv = tape.leaf(y.clone());
        let (out, bound) = m.forward(&mut tape, xv, BatchNormMode::Train).unwrap();
        let loss = prediction_loss(&mut tape, out, yv, opts.weights, opts.ssim).unwrap();
        tape.backward(loss).unwrap();

        let paths: Vec<String> = m.params().iter().map(|(p, _)| p.to_string()).collect();
        for path in &paths {
            let analytic = tape.grad(bound.var(path).unwrap()).unwrap().to_vec();
            for _ in 0..4 {
                let k = r.random_range(0..analytic.len());
                let orig = m.params().get(path).unwrap().data()[k];
                m.params_mut().get_mut(path).unwrap().data_mut()[k] = orig + FD_STEP;
                let lp = m.loss(&x, &y, &opts).unwrap();
                m.params_mut().get_mut(path).unwrap().data_mut()[k] = orig - FD_STEP;
                let lm = m.loss(&x, &y, &opts).unwrap();
                m.params_mut().get_mut(path).unwrap().data_mut()[k] = orig;
                worst = worst.max(rel_err(analytic[k], (lp - lm) / (2.0 * FD_STEP)));
            }
        }
        let gx = tape.grad(xv).unwrap().to_vec();
        for _ in 0..8 {
            let k = r.random_range(0..gx.len());
            let mut xp = x.clone();
            xp.data_mut()[k] += FD_STEP;
            let mut xm = x.clone();
            xm.data_mut()[k] -= FD_STEP;
            let numeric = (m.loss(&xp, &y, &opts).unwrap() - m.loss(&xm, &y, &opts).unwrap()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(gx[k], numeric));
        }
    }
    worst
}
