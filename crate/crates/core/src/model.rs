//! 3D-convolutional U-Net that predicts the frame after an `n`-frame window.
//!
//! Encoder block 1 is conv + leaky ReLU, blocks 2 and 3 add batch norm before
//! the activation. The decoder mirrors it with transposed convolutions and
//! ReLU; the last decoder layer is a bare deconv with a linear output. Each
//! decoder block after the first receives the matching encoder features by
//! channel concatenation (center temporal slice when the extents differ).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{prediction_loss, LossWeights, SsimConstants};
use crate::tensor::{
    adam_step, Activation, AdamConfig, BatchNormMode, Bound, Checkpoint, ConvGeom, Element, ParamStore, RunningStats, Tape,
    Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub window: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Encoder output channels per block; the decoder mirrors them.
    pub widths: [usize; 3],
    pub spatial_strides: [usize; 3],
    /// Temporal zero padding per encoder block (temporal stride is always 1).
    pub temporal_padding: [usize; 3],
    /// `[kT, kH, kW]`, shared by every layer.
    pub kernel: [usize; 3],
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            window: 5,
            frame_height: 240,
            frame_width: 360,
            widths: [60, 120, 240],
            spatial_strides: [2, 2, 2],
            temporal_padding: [0, 0, 1],
            kernel: [3, 3, 3],
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Resolved layer shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Temporal extent after each encoder block.
    pub temporal: [usize; 3],
    pub enc: [ConvGeom; 3],
    pub dec: [ConvGeom; 3],
}

impl ModelConfig {
    /// Smaller network for the synthetic corpus (96×144 frames).
    pub fn synthetic() -> Self {
        ModelConfig {
            frame_height: 96,
            frame_width: 144,
            widths: [16, 32, 64],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::format("model config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<Layout> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "every width must be positive"));
        }
        if self.spatial_strides.contains(&0) {
            return Err(Error::config("spatial_strides", "every stride must be positive"));
        }
        let [kt, kh, kw] = self.kernel;
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config("kernel", format!("sizes must be odd, got {:?}", self.kernel)));
        }
        // with p = k/2 the deconv output padding s + 2p - k = s - 1 is always valid
        let (ph, pw) = (kh / 2, kw / 2);
        let total: usize = self.spatial_strides.iter().product();
        if self.frame_height == 0 || !self.frame_height.is_multiple_of(total) {
            return Err(Error::config(
                "frame_height",
                format!("{} is not divisible by the stride product {total}", self.frame_height),
            ));
        }
        if self.frame_width == 0 || !self.frame_width.is_multiple_of(total) {
            return Err(Error::config(
                "frame_width",
                format!("{} is not divisible by the stride product {total}", self.frame_width),
            ));
        }
        let mut temporal = [0; 3];
        let mut t = self.window;
        for (i, &p) in self.temporal_padding.iter().enumerate() {
            if t + 2 * p < kt {
                return Err(Error::config(
                    "temporal_padding",
                    format!("block {} receives {t} frames, too few for a temporal kernel of {kt}", i + 1),
                ));
            }
            t = t + 2 * p - kt + 1;
            temporal[i] = t;
        }
        if temporal[2] != 1 {
            return Err(Error::config(
                "temporal_padding",
                format!("encoder must reduce {} frames to 1, ends with {}", self.window, temporal[2]),
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in [0, 1)"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must lie in (0, 1]"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        let enc = std::array::from_fn(|i| {
            ConvGeom::new([1, self.spatial_strides[i], self.spatial_strides[i]], [self.temporal_padding[i], ph, pw])
        });
        let dec = std::array::from_fn(|i| {
            let s = self.spatial_strides[i];
            ConvGeom::new([1, s, s], [kt / 2, ph, pw]).with_output_padding([0, s + 2 * ph - kh, s + 2 * pw - kw])
        });
        Ok(Layout { temporal, enc, dec })
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `(path, shape)` of every trainable tensor, in store order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let k = self.kernel;
        let w = |o: usize, i: usize| vec![o, i, k[0], k[1], k[2]];
        let mut out = Vec::new();
        let mut layer = |name: &str, weight: Vec<usize>, bias: usize, bn: bool| {
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.bias"), vec![bias]));
            if bn {
                out.push((format!("{name}.bn.gamma"), vec![bias]));
                out.push((format!("{name}.bn.beta"), vec![bias]));
            }
        };
        layer("enc1", w(w1, self.in_channels), w1, false);
        layer("enc2", w(w2, w1), w2, true);
        layer("enc3", w(w3, w2), w3, true);
        // transposed weights are [C_in, C_out, k...]
        layer("dec3", w(w3, w2), w2, true);
        layer("dec2", w(2 * w2, w1), w1, true);
        layer("dec1", w(2 * w1, 1), 1, false);
        out
    }
}

pub fn digest_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&json))
}

const NORM_LAYERS: [&str; 4] = ["enc2", "enc3", "dec3", "dec2"];

/// Autoencoder with its parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
}

/// Optimizer and objective settings for [`Autoencoder::train_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub ssim: SsimConstants,
    pub adam: AdamConfig,
}

impl<T: Element> Autoencoder<T> {
    /// Weights and biases are drawn from `U(-b, b)` with `b = 1/sqrt(C_in·k³)`
    /// of the layer; batch-norm scales start at 1 and shifts at 0.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let layout = config.layout()?;
        let kvol = config.kernel_volume();
        let mut params = ParamStore::new();
        let shapes = config.param_shapes();
        let mut bound = 0.0;
        for (path, shape) in shapes {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if path.ends_with(".weight") {
                bound = 1.0 / ((shape[if path.starts_with("dec") { 0 } else { 1 }] * kvol) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
            } else if path.ends_with(".bias") {
                (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
            } else if path.ends_with(".gamma") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            params.insert(path, Tensor::new(&shape, data)?)?;
        }
        let [w1, w2, w3] = config.widths;
        let stats = vec![
            RunningStats::new(w2),
            RunningStats::new(w3),
            RunningStats::new(w2),
            RunningStats::new(w1),
        ];
        Ok(Autoencoder {
            config,
            layout,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Expected input shape for a batch of `b`.
    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        let c = &self.config;
        [batch, c.in_channels, c.window, c.frame_height, c.frame_width]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape(shape.first().copied().unwrap_or(0));
        if shape.len() != 5 || shape[0] == 0 || shape != want {
            return Err(Error::Shape(format!(
                "model expects input [B, {}, {}, {}, {}], got {shape:?}",
                want[1], want[2], want[3], want[4]
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Parameters are bound as fresh
    /// leaves; the returned handle maps paths to them. Train mode updates
    /// the batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: BatchNormMode) -> Result<(Var, Bound)> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.graph(tape, input, mode, &mut stats);
        self.stats = stats;
        out
    }

    fn graph(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: BatchNormMode,
        stats: &mut [RunningStats<T>],
    ) -> Result<(Var, Bound)> {
        self.check_input(tape.value(input).shape())?;
        let b = self.params.bind(tape);
        let cfg = &self.config;
        let lay = &self.layout;
        let leaky = Activation::LeakyRelu(cfg.leaky_slope);
        let (mom, eps) = (cfg.bn_momentum, cfg.bn_eps);
        let mut norm = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            let i = NORM_LAYERS.iter().position(|n| *n == name).expect("norm layer");
            let g = b.var(&format!("{name}.bn.gamma"))?;
            let be = b.var(&format!("{name}.bn.beta"))?;
            tape.batchnorm3d(x, g, be, &mut stats[i], mode, mom, eps)
        };
        let conv = |tape: &mut Tape<T>, x: Var, name: &str, geom: ConvGeom, transposed: bool| -> Result<Var> {
            let w = b.var(&format!("{name}.weight"))?;
            let bias = b.var(&format!("{name}.bias"))?;
            if transposed {
                tape.deconv3d(x, w, Some(bias), geom)
            } else {
                tape.conv3d(x, w, Some(bias), geom)
            }
        };

        let e1 = conv(tape, input, "enc1", lay.enc[0], false)?;
        let e1 = tape.activation(e1, leaky);
        let e2 = conv(tape, e1, "enc2", lay.enc[1], false)?;
        let e2 = norm(tape, e2, "enc2")?;
        let e2 = tape.activation(e2, leaky);
        let e3 = conv(tape, e2, "enc3", lay.enc[2], false)?;
        let e3 = norm(tape, e3, "enc3")?;
        let e3 = tape.activation(e3, leaky);

        let d3 = conv(tape, e3, "dec3", lay.dec[2], true)?;
        let d3 = norm(tape, d3, "dec3")?;
        let d3 = tape.activation(d3, Activation::Relu);
        let d3 = self.skip(tape, d3, e2)?;
        let d2 = conv(tape, d3, "dec2", lay.dec[1], true)?;
        let d2 = norm(tape, d2, "dec2")?;
        let d2 = tape.activation(d2, Activation::Relu);
        let d2 = self.skip(tape, d2, e1)?;
        let out = conv(tape, d2, "dec1", lay.dec[0], true)?;
        Ok((out, b))
    }

    fn skip(&self, tape: &mut Tape<T>, dec: Var, enc: Var) -> Result<Var> {
        let td = tape.value(dec).shape()[2];
        let te = tape.value(enc).shape()[2];
        let enc = if te == td {
            enc
        } else {
            tape.slice_temporal(enc, (te - td) / 2, td)?
        };
        tape.concat_channels(dec, enc)
    }

    /// Eval-mode prediction; never mutates the model.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let mut stats = self.stats.clone();
        let (out, _) = self.graph(&mut tape, x, BatchNormMode::Eval, &mut stats)?;
        Ok(tape.take_value(out))
    }

    /// Loss of a train-mode forward pass without any update. Running
    /// statistics are left untouched.
    pub fn loss(&self, input: &Tensor<T>, target: &Tensor<T>, opts: &StepOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let y = tape.leaf(target.clone().with_requires_grad(false));
        let mut stats = self.stats.clone();
        let (out, _) = self.graph(&mut tape, x, BatchNormMode::Train, &mut stats)?;
        let l = prediction_loss(&mut tape, out, y, opts.weights, opts.ssim)?;
        Ok(tape.value(l).item().as_f64())
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn train_step(&mut self, input: &Tensor<T>, target: &Tensor<T>, lr: f64, opts: &StepOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let y = tape.leaf(target.clone().with_requires_grad(false));
        let (out, bound) = self.forward(&mut tape, x, BatchNormMode::Train)?;
        let l = prediction_loss(&mut tape, out, y, opts.weights, opts.ssim)?;
        let value = tape.value(l).item().as_f64();
        tape.backward(l)?;
        self.params.zero_grad();
        self.params.absorb_grads(&tape, &bound);
        adam_step(&mut self.params, lr, opts.adam)?;
        Ok(value)
    }

    /// Parameters, running statistics, the config, and its digest.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (path, t) in self.params.iter() {
            ck.insert(path, t);
        }
        for (name, s) in NORM_LAYERS.iter().zip(&self.stats) {
            let n = s.channels();
            ck.insert(format!("{name}.bn.running_mean"), &Tensor::new(&[n], s.mean.clone()).expect("len"));
            ck.insert(format!("{name}.bn.running_var"), &Tensor::new(&[n], s.var.clone()).expect("len"));
        }
        ck.set_meta("model_config", serde_json::to_string(&self.config).expect("serializable"));
        ck.set_meta("model_digest", self.config.digest());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let json = ck
            .meta("model_config")
            .ok_or_else(|| Error::format("checkpoint", "no model_config metadata"))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::format("checkpoint model_config", e.to_string()))?;
        let digest = config.digest();
        match ck.meta("model_digest") {
            Some(d) if d == digest => {}
            Some(d) => {
                return Err(Error::format(
                    "checkpoint",
                    format!("model config digest mismatch: stored {d}, computed {digest}"),
                ))
            }
            None => return Err(Error::format("checkpoint", "no model_digest metadata")),
        }
        let layout = config.layout()?;
        let mut params = ParamStore::new();
        for (path, shape) in config.param_shapes() {
            let t: Tensor<T> = ck.get(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{path}` has shape {:?}, config implies {shape:?}", t.shape()),
                ));
            }
            params.insert(path, t)?;
        }
        let [w1, w2, w3] = config.widths;
        let mut stats = Vec::new();
        for (name, c) in NORM_LAYERS.iter().zip([w2, w3, w2, w1]) {
            let mean: Tensor<T> = ck.get(&format!("{name}.bn.running_mean"))?;
            let var: Tensor<T> = ck.get(&format!("{name}.bn.running_var"))?;
            if mean.numel() != c || var.numel() != c {
                return Err(Error::format("checkpoint", format!("`{name}` running stats do not hold {c} channels")));
            }
            stats.push(RunningStats {
                mean: mean.into_data(),
                var: var.into_data(),
            });
        }
        Ok(Autoencoder {
            config,
            layout,
            params,
            stats,
        })
    }
}
