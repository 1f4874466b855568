//! End-to-end commands: synthesize a corpus, train, evaluate, benchmark and
//! plot. The CLI is a thin wrapper over these functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, discover, load_clip, load_frames, preprocess, synth_generate, GrayImage, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::losses::{resolve_clip_psnrs, normality_scores, FramePsnr, LossWeights, SsimConstants};
use crate::metrics::{concatenate, parse_scores_csv, roc_auc, score_gap, scores_csv, ClipScores, MetricsFile, Provenance};
use crate::model::{digest_json, Autoencoder, ModelConfig, StepOptions};
use crate::rng::{split, Stream};
use crate::tensor::{AdamConfig, Checkpoint, LrSchedule, Tensor};
use crate::transform::{self, add_gaussian_noise, apply_patch_anomaly, Frame, FrameCuboid, PatchConfig, TransformPolicy};

/// Everything that determines a training run. The dataset location is not
/// part of the digest: the same config on a copy of the data is the same run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip)]
    pub data: PathBuf,
    pub model: ModelConfig,
    pub policy: TransformPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patch: PatchConfig,
    pub loss_weights: LossWeights,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Gaussian input noise during training.
    pub noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::new(),
            model: ModelConfig::default(),
            policy: TransformPolicy::TmtOrSrt,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            patch: PatchConfig::default(),
            loss_weights: LossWeights::default(),
            lr_max: 2e-4,
            lr_min: 1e-4,
            noise: true,
        }
    }
}

impl RunConfig {
    /// Defaults for the synthetic corpus: the smaller model and a patch a
    /// quarter of the frame height, the same ratio as 60 px on 240-row frames.
    pub fn synthetic(data: impl Into<PathBuf>) -> Self {
        RunConfig {
            data: data.into(),
            model: ModelConfig::synthetic(),
            patch: PatchConfig::square(24),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        self.loss_weights.validate()?;
        LrSchedule::new(self.lr_max, self.lr_min, self.epochs.max(1) as u64)?;
        if self.policy != TransformPolicy::Baseline {
            self.patch
                .admissible(self.model.frame_height, self.model.frame_width)
                .map_err(|e| Error::config("patch", e.to_string()))?;
            if self.patch.width != self.patch.height
                && matches!(
                    self.policy,
                    TransformPolicy::SrtOnly
                        | TransformPolicy::TmtOrSrt
                        | TransformPolicy::TmtOrSrtChunk
                        | TransformPolicy::TmtAndSrt
                )
            {
                return Err(Error::config("patch", "rotation policies need a square patch"));
            }
        }
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_digest: self.digest(),
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<path>` with `suffix` appended to the file name (`ckpt.bin` → `ckpt.bin.loss.tsv`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub abnormal_frames: usize,
}

/// Generates the synthetic corpus under `out` and stores the config next to it.
pub fn cmd_synth(cfg: &SyntheticSceneConfig, out: &Path) -> Result<SynthSummary> {
    let corpus = synth_generate(cfg)?;
    corpus.write(out)?;
    let header = format!("# seed={} config_digest={}\n", cfg.seed, digest_json(cfg));
    write_text(&out.join("synth.toml"), &(header + &cfg.to_toml()))?;
    let frames = corpus.train.iter().chain(&corpus.test).map(|c| c.frames.len()).sum();
    let abnormal_frames = corpus
        .test
        .iter()
        .filter_map(|c| c.labels.as_ref())
        .map(|l| l.iter().filter(|&&v| v == 0).count())
        .sum();
    Ok(SynthSummary {
        train_clips: corpus.train.len(),
        test_clips: corpus.test.len(),
        frames,
        abnormal_frames,
    })
}

fn load_split(clips: &[data::ClipManifest], model: &ModelConfig) -> Result<Vec<Vec<Frame>>> {
    clips
        .iter()
        .map(|c| load_frames(c, model.frame_height, model.frame_width))
        .collect()
}

fn cuboid(frames: &[Frame], start: usize, n: usize) -> Result<FrameCuboid> {
    let refs: Vec<&Frame> = frames[start..start + n].iter().collect();
    FrameCuboid::from_frames(&refs, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub transform_log: PathBuf,
}

/// Trains from scratch and writes the checkpoint to `out`, the per-epoch
/// loss log to `<out>.loss.tsv` and one transform record per training
/// sample to `<out>.transforms.log`.
pub fn cmd_train(run: &RunConfig, out: &Path) -> Result<TrainReport> {
    run.validate()?;
    let dataset = discover(&run.data)?;
    if dataset.train.is_empty() {
        return Err(Error::Invalid(format!("no training clips under {}", run.data.join("train").display())));
    }
    let n = run.model.window;
    let clips = load_split(&dataset.train, &run.model)?;
    let mut windows = Vec::new();
    for (ci, frames) in clips.iter().enumerate() {
        if frames.len() < n + 1 {
            return Err(Error::Invalid(format!(
                "training clip `{}` has {} frames, needs at least {}",
                dataset.train[ci].id,
                frames.len(),
                n + 1
            )));
        }
        windows.extend(data::window_indices(frames.len(), n)?.into_iter().map(|(k, _)| (ci, k)));
    }

    let prov = run.provenance();
    let mut model = Autoencoder::<f32>::build(run.model.clone(), &mut split(run.seed, Stream::Init, 0))?;
    // zero epochs writes the initialized model, the untrained reference point
    let schedule = LrSchedule::new(run.lr_max, run.lr_min, run.epochs.max(1) as u64)?;
    let opts = StepOptions {
        weights: run.loss_weights,
        ssim: SsimConstants::default(),
        adam: AdamConfig::default(),
    };
    let (h, w) = (run.model.frame_height, run.model.frame_width);
    let mut loss_log = format!("# {}\nepoch\tlr\tmean_loss\n", prov.comment());
    let mut transform_log = format!("# {}\nepoch\tstep\tclip\tstart\tsigma\ttransform\n", prov.comment());
    let mut epoch_loss = Vec::with_capacity(run.epochs);
    let mut sample = 0u64;
    let mut steps = 0u64;
    for epoch in 0..run.epochs {
        let lr = schedule.lr_at(epoch as u64);
        let mut order = windows.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split(run.seed, Stream::Shuffle, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(run.batch_size) {
            let b = batch.len();
            let mut input = Vec::with_capacity(b * n * h * w);
            let mut target = Vec::with_capacity(b * h * w);
            for &(ci, k) in batch {
                let mut c = cuboid(&clips[ci], k, n)?;
                let (tc, spec) =
                    apply_patch_anomaly(c, &mut split(run.seed, Stream::Transform, sample), run.policy, &run.patch)?;
                c = tc;
                let mut sigma = 0.0;
                if run.noise {
                    let (nc, s) = add_gaussian_noise(c, &mut split(run.seed, Stream::Noise, sample));
                    c = nc;
                    sigma = s;
                }
                let _ = writeln!(
                    transform_log,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    epoch + 1,
                    steps,
                    dataset.train[ci].id,
                    k,
                    sigma,
                    spec
                );
                input.extend_from_slice(c.data());
                target.extend_from_slice(&clips[ci][k + n].data);
                sample += 1;
            }
            let x = Tensor::new(&[b, 1, n, h, w], input)?;
            let y = Tensor::new(&[b, 1, 1, h, w], target)?;
            total += model.train_step(&x, &y, lr, &opts)?;
            batches += 1;
            steps += 1;
        }
        let mean = total / batches as f64;
        let _ = writeln!(loss_log, "{}\t{}\t{}", epoch + 1, lr, mean);
        epoch_loss.push(mean);
    }

    let mut ck = model.to_checkpoint();
    ck.set_meta("seed", run.seed.to_string());
    ck.set_meta("config_digest", prov.config_digest.clone());
    ck.set_meta("run_config", serde_json::to_string(run).expect("serializable"));
    ck.set_meta("policy", run.policy.name());
    ck.set_meta("epochs", run.epochs.to_string());
    ck.set_meta("steps", steps.to_string());
    ck.set_meta("final_loss", epoch_loss.last().copied().unwrap_or(f64::NAN).to_string());
    create_parent(out)?;
    ck.save(out)?;
    let loss_path = sibling(out, ".loss.tsv");
    let transform_path = sibling(out, ".transforms.log");
    write_text(&loss_path, &loss_log)?;
    write_text(&transform_path, &transform_log)?;
    Ok(TrainReport {
        epoch_loss,
        steps,
        checkpoint: out.to_path_buf(),
        loss_log: loss_path,
        transform_log: transform_path,
    })
}

/// Model plus the provenance recorded when it was trained.
pub struct Trained {
    pub model: Autoencoder<f32>,
    pub provenance: Provenance,
}

pub fn load_trained(path: &Path) -> Result<Trained> {
    let ck = Checkpoint::load(path)?;
    let model = Autoencoder::from_checkpoint(&ck)?;
    let seed = ck
        .meta("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path.display().to_string(), "checkpoint has no seed metadata"))?;
    let config_digest = ck
        .meta("config_digest")
        .ok_or_else(|| Error::format(path.display().to_string(), "checkpoint has no config_digest metadata"))?
        .to_string();
    Ok(Trained {
        model,
        provenance: Provenance { seed, config_digest },
    })
}

/// Raw PSNR outcome of every predictable frame of a clip.
fn clip_psnrs(model: &Autoencoder<f32>, frames: &[Frame]) -> Result<Vec<FramePsnr>> {
    let n = model.config().window;
    let (h, w) = (model.config().frame_height, model.config().frame_width);
    data::window_indices(frames.len(), n)?
        .into_iter()
        .map(|(k, t)| {
            let c = cuboid(frames, k, n)?;
            let pred = model.predict(&Tensor::new(&[1, 1, n, h, w], c.into_data())?)?;
            FramePsnr::measure(pred.data(), &frames[t].data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipScores>,
    pub metrics: MetricsFile,
    pub auc: Option<f64>,
    pub score_gap: Option<f64>,
    pub warnings: Vec<String>,
    pub scores_path: PathBuf,
}

/// Scores every test clip without transforms or noise. Writes the metrics
/// file to `out` and per-frame scores to `<out>.scores.csv`.
pub fn cmd_eval(ckpt: &Path, data_root: &Path, out: &Path) -> Result<EvalReport> {
    let before = transform::counters();
    let Trained { model, provenance } = load_trained(ckpt)?;
    let dataset = discover(data_root)?;
    if dataset.test.is_empty() {
        return Err(Error::Invalid(format!("no test clips under {}", data_root.join("test").display())));
    }
    let n = model.config().window;
    let mut clips = Vec::with_capacity(dataset.test.len());
    let mut metrics = MetricsFile::default();
    for manifest in &dataset.test {
        let frames = load_frames(manifest, model.config().frame_height, model.config().frame_width)?;
        let psnr = resolve_clip_psnrs(&clip_psnrs(&model, &frames)?);
        let scores = normality_scores(&psnr)?;
        let (lo, hi) = psnr.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        metrics.set(format!("clip.{}.psnr_min", manifest.id), lo);
        metrics.set(format!("clip.{}.psnr_max", manifest.id), hi);
        clips.push(ClipScores {
            clip_id: manifest.id.clone(),
            skip: n,
            frame_index: (n..frames.len()).collect(),
            psnr,
            scores,
            labels: manifest.labels.as_ref().map(|l| l[n..].to_vec()),
        });
    }
    let mut warnings = Vec::new();
    let (mut auc, mut gap) = (None, None);
    match concatenate(&clips) {
        Some((s, l)) => match (roc_auc(&s, &l), score_gap(&s, &l)) {
            (Ok(a), Ok(g)) => {
                auc = Some(a);
                gap = Some(g);
            }
            (Err(e), _) | (_, Err(e)) => warnings.push(format!("AUC omitted: {e}")),
        },
        None => warnings.push("AUC omitted: some test clips have no labels.txt".into()),
    }
    if let Some(a) = auc {
        metrics.set("auc", a);
    }
    if let Some(g) = gap {
        metrics.set("score_gap", g);
    }
    metrics.set("frames_scored", clips.iter().map(|c| c.len()).sum::<usize>());
    metrics.set("clips", clips.len());
    metrics.set("seed", provenance.seed);
    metrics.set("config_digest", &provenance.config_digest);

    let used = transform::counters().since(&before);
    if used.total_calls() != 0 {
        return Err(Error::Invalid(format!("evaluation invoked the transform module: {used:?}")));
    }
    create_parent(out)?;
    metrics.write(out)?;
    let scores_path = sibling(out, ".scores.csv");
    write_text(&scores_path, &scores_csv(&clips, &provenance))?;
    Ok(EvalReport {
        clips,
        metrics,
        auc,
        score_gap: gap,
        warnings,
        scores_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub fps: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub iters: usize,
    pub transform_calls: u64,
    pub metrics: MetricsFile,
}

fn machine_metadata(m: &mut MetricsFile) {
    m.set("machine.os", std::env::consts::OS);
    m.set("machine.arch", std::env::consts::ARCH);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    m.set("machine.threads", threads);
    let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_string())
    });
    m.set("machine.cpu", cpu.unwrap_or_else(|| "unknown".into()));
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Times the per-frame detection path on preloaded frames: preprocessing
/// of the incoming frame, window assembly, forward pass and PSNR. Clip-level
/// normalization needs the whole clip and is not part of the timed path.
pub fn cmd_bench(ckpt: &Path, data_root: &Path, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::config("iters", "must be positive"));
    }
    let before = transform::counters();
    let Trained { model, provenance } = load_trained(ckpt)?;
    let dataset = discover(data_root)?;
    let manifests = if dataset.test.is_empty() { &dataset.train } else { &dataset.test };
    let n = model.config().window;
    let (h, w) = (model.config().frame_height, model.config().frame_width);
    let raw: Vec<Vec<GrayImage>> = manifests
        .iter()
        .map(load_clip)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|c| c.len() > n)
        .collect();
    if raw.is_empty() {
        return Err(Error::Invalid(format!("no clip under {} has more than {n} frames", data_root.display())));
    }

    let (mut clip, mut t) = (0usize, n);
    let mut context: Vec<Frame> = raw[0][..n].iter().map(|f| preprocess(f, h, w)).collect::<Result<_>>()?;
    let mut latencies = Vec::with_capacity(iters);
    let mut total = 0.0;
    for i in 0..warmup + iters {
        let start = Instant::now();
        let incoming = preprocess(&raw[clip][t], h, w)?;
        let refs: Vec<&Frame> = context.iter().collect();
        let c = FrameCuboid::from_frames(&refs, n)?;
        let pred = model.predict(&Tensor::new(&[1, 1, n, h, w], c.into_data())?)?;
        std::hint::black_box(FramePsnr::measure(pred.data(), &incoming.data)?);
        let elapsed = start.elapsed().as_secs_f64();
        if i >= warmup {
            latencies.push(elapsed * 1e3);
            total += elapsed;
        }
        context.remove(0);
        context.push(incoming);
        t += 1;
        if t == raw[clip].len() {
            clip = (clip + 1) % raw.len();
            t = n;
            context = raw[clip][..n].iter().map(|f| preprocess(f, h, w)).collect::<Result<_>>()?;
        }
    }
    let used = transform::counters().since(&before);
    if used.total_calls() != 0 {
        return Err(Error::Invalid(format!("benchmark invoked the transform module: {used:?}")));
    }
    latencies.sort_by(f64::total_cmp);
    let fps = iters as f64 / total;
    let (p50, p95) = (percentile(&latencies, 0.5), percentile(&latencies, 0.95));
    let mut metrics = MetricsFile::default();
    metrics.set("fps", fps);
    metrics.set("latency_p50_ms", p50);
    metrics.set("latency_p95_ms", p95);
    metrics.set("iters", iters);
    metrics.set("warmup", warmup);
    metrics.set("frame_height", h);
    metrics.set("frame_width", w);
    metrics.set("seed", provenance.seed);
    metrics.set("config_digest", &provenance.config_digest);
    machine_metadata(&mut metrics);
    Ok(BenchReport {
        fps,
        latency_p50_ms: p50,
        latency_p95_ms: p95,
        iters,
        transform_calls: used.total_calls(),
        metrics,
    })
}

fn clip_svg(c: &ClipScores, provenance: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 240.0;
    const L: f64 = 50.0;
    const R: f64 = 15.0;
    const T: f64 = 25.0;
    const B: f64 = 35.0;
    let (pw, ph) = (W - L - R, H - T - B);
    let first = c.frame_index.first().copied().unwrap_or(0) as f64;
    let last = c.frame_index.last().copied().unwrap_or(0) as f64;
    let span = (last - first).max(1.0);
    let x = |f: f64| L + (f - first) / span * pw;
    let y = |v: f64| T + (1.0 - v.clamp(0.0, 1.0)) * ph;
    let step = pw / span;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, "<!-- {provenance} -->");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    if let Some(labels) = &c.labels {
        let mut i = 0;
        while i < labels.len() {
            if labels[i] == 0 {
                let j = (i..labels.len()).find(|&j| labels[j] != 0).unwrap_or(labels.len());
                let x0 = x(c.frame_index[i] as f64) - step / 2.0;
                let x1 = x(c.frame_index[j - 1] as f64) + step / 2.0;
                let _ = writeln!(
                    s,
                    r##"<rect class="abnormal" x="{:.2}" y="{T}" width="{:.2}" height="{ph}" fill="#9ecae1" fill-opacity="0.35"/>"##,
                    x0.max(L),
                    (x1.min(L + pw) - x0.max(L)).max(0.5)
                );
                i = j;
            } else {
                i += 1;
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text class="ytick" x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.1}</text>"#,
            L - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">frame</text>"#,
        L + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="start">{}</text>"#,
        L,
        T - 8.0,
        c.clip_id
    );
    let poly = |vals: &mut dyn Iterator<Item = (f64, f64)>| -> String {
        vals.map(|(f, v)| format!("{:.2},{:.2}", x(f), y(v))).collect::<Vec<_>>().join(" ")
    };
    if let Some(labels) = &c.labels {
        let pts = poly(&mut c.frame_index.iter().zip(labels).map(|(&f, &l)| (f as f64, l as f64)));
        let _ = writeln!(
            s,
            r#"<polyline class="label" points="{pts}" fill="none" stroke="blue" stroke-width="1.5"/>"#
        );
    }
    let pts = poly(&mut c.frame_index.iter().zip(&c.scores).map(|(&f, &v)| (f as f64, v)));
    let _ = writeln!(
        s,
        r#"<polyline class="score" points="{pts}" fill="none" stroke="red" stroke-width="1.5"/>"#
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `<clip>.svg` and `<clip>.tsv` per clip into `out_dir`.
pub fn cmd_plot(scores: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(scores).map_err(|e| Error::io(scores, e))?;
    let (clips, prov) = parse_scores_csv(&text).map_err(|e| match e {
        Error::Format { context, msg } => Error::format(format!("{}: {context}", scores.display()), msg),
        other => other,
    })?;
    let prov = prov.unwrap_or_else(|| "seed=unknown config_digest=unknown".into());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for c in &clips {
        let svg = out_dir.join(format!("{}.svg", c.clip_id));
        write_text(&svg, &clip_svg(c, &prov))?;
        let mut tsv = format!("# {prov}\nframe_index\ts_t\tlabel\n");
        for i in 0..c.len() {
            let label = c.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
            let _ = writeln!(tsv, "{}\t{}\t{}", c.frame_index[i], c.scores[i], label);
        }
        write_text(&out_dir.join(format!("{}.tsv", c.clip_id)), &tsv)?;
        written.push(svg);
    }
    Ok(written)
}
