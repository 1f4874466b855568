use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fastano::data::SyntheticSceneConfig;
use fastano::harness::{cmd_bench, cmd_eval, cmd_plot, cmd_synth, cmd_train, RunConfig};
use fastano::model::ModelConfig;
use fastano::transform::{PatchConfig, TransformPolicy};

#[derive(Parser)]
#[command(name = "fastano", version, about = "Video anomaly detection by future-frame prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus.
    Synth {
        /// Scene config (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `<data>/train`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run config (TOML). Flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model config (TOML), overriding the run config's model section.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        policy: Option<TransformPolicy>,
        /// Square patch side in pixels.
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; logs are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score `<data>/test` and write metrics plus per-frame scores.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics file; scores go to `<out>.scores.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure inference throughput.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render score curves from a scores CSV.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = match config {
                Some(p) => SyntheticSceneConfig::from_toml(&read(&p)?).with_context(|| format!("in {}", p.display()))?,
                None => SyntheticSceneConfig::default(),
            };
            let s = cmd_synth(&cfg, &out)?;
            println!(
                "wrote {} train clips, {} test clips, {} frames ({} abnormal) to {}",
                s.train_clips,
                s.test_clips,
                s.frames,
                s.abnormal_frames,
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            model,
            policy,
            patch_size,
            epochs,
            seed,
            out,
        } => {
            let mut run = match config {
                Some(p) => RunConfig::from_toml(&read(&p)?).with_context(|| format!("in {}", p.display()))?,
                None => RunConfig::synthetic(&data),
            };
            run.data = data;
            if let Some(p) = model {
                run.model = ModelConfig::from_toml(&read(&p)?).with_context(|| format!("in {}", p.display()))?;
            }
            if let Some(p) = policy {
                run.policy = p;
            }
            if let Some(s) = patch_size {
                run.patch = PatchConfig {
                    margin_frac: run.patch.margin_frac,
                    ..PatchConfig::square(s)
                };
            }
            if let Some(e) = epochs {
                run.epochs = e;
            }
            if let Some(s) = seed {
                run.seed = s;
            }
            let r = cmd_train(&run, &out)?;
            for (i, l) in r.epoch_loss.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.6}", i + 1);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Eval { ckpt, data, out } => {
            let r = cmd_eval(&ckpt, &data, &out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", r.metrics.render());
            println!("scores {}", r.scores_path.display());
        }
        Command::Bench {
            ckpt,
            data,
            warmup,
            iters,
            out,
        } => {
            let r = cmd_bench(&ckpt, &data, warmup, iters)?;
            let text = r.metrics.render();
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Plot { scores, out } => {
            for p in cmd_plot(&scores, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
