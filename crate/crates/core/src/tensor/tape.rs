//! Dynamic reverse-mode tape. Each forward pass records onto a fresh tape;
//! `backward` walks it in reverse and leaves gradients on the leaves that
//! asked for them.

use serde::{Deserialize, Serialize};

use super::conv::{ConvGeom, ConvPlan};
use super::norm::{self, BatchNormMode, RunningStats};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Act { input: Var, slope: T },
    Conv { input: Var, weight: Var, bias: Option<Var>, plan: ConvPlan },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, mode: BatchNormMode },
    Concat { a: Var, b: Var },
    SliceTemporal { input: Var, start: usize },
    L1 { pred: Var, target: Var },
    Ssim { pred: Var, target: Var, c1: f64, c2: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(samples, elements per sample)`: rank-5 tensors are batches, anything
/// else is one sample.
fn sample_split(shape: &[usize]) -> (usize, usize) {
    let numel: usize = shape.iter().product();
    if shape.len() == 5 && shape[0] > 0 {
        (shape[0], numel / shape[0])
    } else {
        (1, numel)
    }
}

struct FrameStats {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

fn frame_stats<T: Element>(x: &[T], y: &[T]) -> FrameStats {
    let n = x.len() as f64;
    let mx = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a.as_f64() - mx, b.as_f64() - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    FrameStats {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cov: cov / n,
    }
}

/// Global-statistics SSIM of one frame pair.
pub(crate) fn ssim_value<T: Element>(x: &[T], y: &[T], c1: f64, c2: f64) -> f64 {
    let s = frame_stats(x, y);
    ((2.0 * s.mx * s.my + c1) * (2.0 * s.cov + c2)) / ((s.mx * s.mx + s.my * s.my + c1) * (s.vx + s.vy + c2))
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are kept for it iff `requires_grad` is set.
    /// Any gradient the tensor already carries is dropped: a tape's gradients
    /// come from its own backward passes only.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn derived(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("derived tensor shape")
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = self.derived(self.value(a).shape(), data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = self.derived(v.shape(), v.data().iter().map(|&x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let slope = T::lit(kind.slope());
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let t = self.derived(v.shape(), data);
        self.push(t, Op::Act { input: a, slope }, &[a])
    }

    fn conv_common(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, transposed: bool) -> Result<Var> {
        let in_shape = self.value(input).shape().to_vec();
        let unbatched = in_shape.len() == 4;
        let shape5: Vec<usize> = if unbatched {
            std::iter::once(1).chain(in_shape.iter().copied()).collect()
        } else {
            in_shape.clone()
        };
        let bias_shape = bias.map(|b| self.value(b).shape().to_vec());
        let plan = ConvPlan::new(&shape5, self.value(weight).shape(), bias_shape.as_deref(), geom, transposed)?;
        let out = plan.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut out_shape = plan.out_shape();
        if unbatched {
            out_shape.remove(0);
        }
        let t = self.derived(&out_shape, out);
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(t, Op::Conv { input, weight, bias, plan }, &parents))
    }

    /// Cross-correlation. `input` is `[B, C_in, T, H, W]` or `[C_in, T, H, W]`,
    /// `weight` is `[C_out, C_in, kT, kH, kW]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv_common(input, weight, bias, geom, false)
    }

    /// Transposed convolution, `weight` is `[C_in, C_out, kT, kH, kW]`.
    pub fn deconv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv_common(input, weight, bias, geom, true)
    }

    /// Batch normalization over `[B, C, T, H, W]`. Train mode updates `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 5 {
            return Err(Error::Shape(format!("batchnorm3d expects [B, C, T, H, W], got {shape:?}")));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "{name} {:?} does not match {c} channels of {shape:?}",
                    self.value(v).shape()
                )));
            }
        }
        if stats.channels() != c {
            return Err(Error::Shape(format!(
                "running stats hold {} channels, input {shape:?} has {c}",
                stats.channels()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("batchnorm epsilon must be positive, got {eps}")));
        }
        let out = norm::forward(
            self.value(input).data(),
            &shape,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
            momentum,
            eps,
        );
        let t = self.derived(&shape, out.y);
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
                mode,
            },
            &[input, gamma, beta],
        ))
    }

    /// Channel concatenation of two `[B, C, T, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("cannot concatenate {sa:?} and {sb:?} along channels")));
        }
        let vol: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity((ca + cb) * vol * sa[0]);
        for n in 0..sa[0] {
            data.extend_from_slice(&self.value(a).data()[n * ca * vol..][..ca * vol]);
            data.extend_from_slice(&self.value(b).data()[n * cb * vol..][..cb * vol]);
        }
        let shape = [sa[0], ca + cb, sa[2], sa[3], sa[4]];
        let t = self.derived(&shape, data);
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Temporal sub-range `[start, start + len)` of a `[B, C, T, H, W]` tensor.
    pub fn slice_temporal(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 5 || len == 0 || start + len > s[2] {
            return Err(Error::Shape(format!("temporal slice {start}..{} out of range for {s:?}", start + len)));
        }
        let plane = s[3] * s[4];
        let mut data = Vec::with_capacity(s[0] * s[1] * len * plane);
        let src = self.value(input).data();
        for bc in 0..s[0] * s[1] {
            data.extend_from_slice(&src[(bc * s[2] + start) * plane..][..len * plane]);
        }
        let t = self.derived(&[s[0], s[1], len, s[3], s[4]], data);
        Ok(self.push(t, Op::SliceTemporal { input, start }, &[input]))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "l1_loss")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len() as f64;
        let v = p.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(T::lit(v)), Op::L1 { pred, target }, &[pred, target]))
    }

    /// `1 - SSIM` with whole-frame statistics, averaged over the batch.
    pub fn ssim_loss(&mut self, pred: Var, target: Var, c1: f64, c2: f64) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "ssim_loss")?;
        let (samples, per) = sample_split(self.value(pred).shape());
        if per == 0 {
            return Err(Error::Shape("ssim_loss on empty frames".into()));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for s in 0..samples {
            total += 1.0 - ssim_value(&p[s * per..][..per], &t[s * per..][..per], c1, c2);
        }
        let v = T::lit(total / samples as f64);
        Ok(self.push(Tensor::scalar(v), Op::Ssim { pred, target, c1, c2 }, &[pred, target]))
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (parent, contribution) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match grads[parent.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a = *a + *c),
                    None => grads[parent.0] = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Act { input, slope } => {
                let x = val(*input);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * *slope })
                    .collect();
                vec![(*input, d)]
            }
            Op::Conv { input, weight, bias, plan } => {
                let want = [self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b))];
                let (dx, dw, db) = plan.backward(val(*input), val(*weight), g, want);
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode } => {
                let shape = node.value.shape();
                let (dx, dg, db) = norm::backward(g, xhat, inv_std, val(*gamma), shape, *mode);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let vol: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(sa[0] * ca * vol);
                let mut gb = Vec::with_capacity(sb[0] * cb * vol);
                for n in 0..sa[0] {
                    let chunk = &g[n * (ca + cb) * vol..][..(ca + cb) * vol];
                    ga.extend_from_slice(&chunk[..ca * vol]);
                    gb.extend_from_slice(&chunk[ca * vol..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SliceTemporal { input, start } => {
                let s = self.nodes[input.0].value.shape();
                let len = node.value.shape()[2];
                let plane = s[3] * s[4];
                let mut d = vec![T::zero(); s.iter().product()];
                for bc in 0..s[0] * s[1] {
                    d[(bc * s[2] + start) * plane..][..len * plane].copy_from_slice(&g[bc * len * plane..][..len * plane]);
                }
                vec![(*input, d)]
            }
            Op::L1 { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = g[0] / T::lit(p.len() as f64);
                let dp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let dt = dp.iter().map(|&x| -x).collect();
                vec![(*pred, dp), (*target, dt)]
            }
            Op::Ssim { pred, target, c1, c2 } => {
                let (p, t) = (val(*pred), val(*target));
                let (samples, per) = sample_split(self.nodes[pred.0].value.shape());
                let mut dp = vec![T::zero(); p.len()];
                let mut dt = vec![T::zero(); t.len()];
                let upstream = g[0].as_f64();
                for s in 0..samples {
                    let (x, y) = (&p[s * per..][..per], &t[s * per..][..per]);
                    let st = frame_stats(x, y);
                    let a = 2.0 * st.mx * st.my + c1;
                    let b = 2.0 * st.cov + c2;
                    let c = st.mx * st.mx + st.my * st.my + c1;
                    let d = st.vx + st.vy + c2;
                    let ssim = a * b / (c * d);
                    let n = per as f64;
                    // d(1 - ssim)/dx_i averaged over samples
                    let k = -upstream * ssim / n / samples as f64;
                    for i in 0..per {
                        let (xi, yi) = (x[i].as_f64() - st.mx, y[i].as_f64() - st.my);
                        let gx = 2.0 * st.my / a + 2.0 * yi / b - 2.0 * st.mx / c - 2.0 * xi / d;
                        let gy = 2.0 * st.mx / a + 2.0 * xi / b - 2.0 * st.my / c - 2.0 * yi / d;
                        dp[s * per + i] = T::lit(k * gx);
                        dt[s * per + i] = T::lit(k * gy);
                    }
                }
                vec![(*pred, dp), (*target, dt)]
            }
        }
    }
}
