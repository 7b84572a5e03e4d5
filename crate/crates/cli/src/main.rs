use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use safepaint::corpus::{load_dir, synthetic_split, Split};
use safepaint::eval::{antiforensic_eval, inpaint_with, train_copy_fill_detector, EvalConfig, Method};
use safepaint::masks::generate_irregular;
use safepaint::probes::{self, DetectorConfig};
use safepaint::train::{load_trainer, train_run, TrainConfig};
use safepaint::{Error, Image, Mask, MaskBucket};

/// Anti-forensic inpainting: masks, training, inpainting, probes and evaluation.
#[derive(Parser, Debug)]
#[command(name = "safepaint", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate seeded brush-stroke masks within a ratio bucket.
    MakeMasks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ratio bucket such as `30-40`.
        #[arg(long)]
        bucket: MaskBucket,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of masks; more than one writes `mask-NNNN.png` into `--out`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the two-stage generator.
    Train {
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image directory, or `synthetic` for the generated texture corpus.
        #[arg(long)]
        data: String,
        /// Output directory for the log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fill the hole of an image.
    Inpaint {
        /// Checkpoint, required by the learned methods.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Safepaint)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an image with a forensic probe.
    Detect {
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth hole mask used for scoring.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum)]
        probe: ProbeArg,
        #[arg(long)]
        out_heatmap: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Seed of the learned probe's training.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare inpainting methods against the probes on held-out images.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image directory, or `synthetic`.
        #[arg(long)]
        data: String,
        /// Comma-separated buckets such as `10-20,30-40`.
        #[arg(long, value_delimiter = ',', default_value = "10-20,30-40")]
        buckets: Vec<MaskBucket>,
        /// JPEG quality applied before scoring.
        #[arg(long)]
        jpeg_qf: Option<u8>,
        /// Limit the number of held-out images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out_report: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Safepaint,
    Stage1,
    Diffusion,
    Exemplar,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Safepaint => Method::SafePaint,
            MethodArg::Stage1 => Method::Stage1,
            MethodArg::Diffusion => Method::Diffusion,
            MethodArg::Exemplar => Method::Exemplar,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeArg {
    Kl,
    Variance,
    Similarity,
    Learned,
}

fn load_corpus(data: &str, size: usize, seed: u64) -> safepaint::Result<Split> {
    if data == "synthetic" {
        Ok(synthetic_split(seed, 200, 50, size))
    } else {
        load_dir(Path::new(data), size, seed)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> safepaint::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> safepaint::Result<()> {
    match cli.command {
        Command::MakeMasks {
            seed,
            bucket,
            size,
            count,
            out,
        } => {
            if size < 16 {
                return Err(Error::InvalidArgument(format!("--size must be at least 16, got {size}")));
            }
            if count == 1 {
                return generate_irregular(seed, bucket, size, size)?.save_png(&out);
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for i in 0..count {
                generate_irregular(seed.wrapping_add(i as u64), bucket, size, size)?
                    .save_png(out.join(format!("mask-{i:04}.png")))?;
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => {
                    let mut cfg = TrainConfig::default();
                    cfg.apply_env()?;
                    cfg
                }
            };
            if let Some(path) = &resume {
                // The corpus must match the checkpoint's configuration.
                let saved = load_trainer(path)?.cfg;
                cfg.seed = saved.seed;
                cfg.image_size = saved.image_size;
            }
            let split = load_corpus(&data, cfg.image_size, cfg.seed)?;
            let images: Vec<Image> = split.train.into_iter().map(|n| n.image).collect();
            let summary = train_run(&images, &cfg, &out, resume.as_deref())?;
            eprintln!(
                "trained {} steps; checkpoint {}",
                summary.steps,
                summary.final_checkpoint.display()
            );
            if summary.collapse_steps > 0 {
                eprintln!(
                    "warning: domain vectors collapsed (batch variance < 1e-6) on {} steps",
                    summary.collapse_steps
                );
            }
            Ok(())
        }
        Command::Inpaint {
            ckpt,
            image,
            mask,
            method,
            out,
        } => {
            let img = Image::load_png(&image)?;
            let m = Mask::load_png(&mask)?;
            let method = Method::from(method);
            let mut trainer = match (&ckpt, method.needs_checkpoint()) {
                (Some(path), true) => Some(load_trainer(path)?),
                (None, true) => return Err(Error::Checkpoint(format!("--method {method} needs --ckpt"))),
                _ => None,
            };
            let result = inpaint_with(method, trainer.as_mut().map(|t| &mut t.nets), &img, &m)?;
            result.save_png(&out)
        }
        Command::Detect {
            image,
            mask,
            probe,
            out_heatmap,
            out_report,
            seed,
        } => {
            let img = Image::load_png(&image)?;
            let m = Mask::load_png(&mask)?;
            m.check_image(&img)?;
            let (heat, report, extra) = match probe {
                ProbeArg::Kl => {
                    let gap = probes::kl_domain_gap(&img, &m, probes::DEFAULT_BINS)?;
                    let heat = probes::kl_heatmap(&img, &m, probes::DEFAULT_BINS)?;
                    let rep = probes::detection_metrics(&heat, &m, probes::DEFAULT_THRESHOLD, probes::DEFAULT_COVERAGE)?;
                    (heat, rep, json!({ "kl_gap": gap }))
                }
                ProbeArg::Variance | ProbeArg::Similarity => {
                    let heat = match probe {
                        ProbeArg::Variance => probes::local_variance_map(&img, 5)?,
                        _ => probes::patch_similarity_map(
                            &img,
                            probes::DEFAULT_PATCH,
                            probes::DEFAULT_STRIDE,
                            probes::DEFAULT_TAU,
                        )?,
                    };
                    let rep = probes::detection_metrics(&heat, &m, probes::DEFAULT_THRESHOLD, probes::DEFAULT_COVERAGE)?;
                    (heat, rep, json!({}))
                }
                ProbeArg::Learned => {
                    let images: Vec<Image> = synthetic_split(seed, 64, 0, 64).train.into_iter().map(|n| n.image).collect();
                    let det = train_copy_fill_detector(&images, seed, &DetectorConfig::default())?;
                    let (heat, rep) = det.detect(&img, &m)?;
                    let score = probes::PatchDetector::score(&heat);
                    (heat, rep, json!({ "score": score }))
                }
            };
            heat.save_png(&out_heatmap)?;
            let mut doc = json!({
                "probe": format!("{probe:?}").to_lowercase(),
                "auc": report.auc,
                "f1": report.f1,
                "flagged": report.flagged,
            });
            doc.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
            write_json(&out_report, &doc)
        }
        Command::Evaluate {
            ckpt,
            data,
            buckets,
            jpeg_qf,
            limit,
            out_report,
        } => {
            let mut trainer = load_trainer(&ckpt)?;
            let seed = trainer.cfg.seed;
            let split = load_corpus(&data, trainer.cfg.image_size, seed)?;
            let mut held_out = split.held_out;
            if let Some(n) = limit {
                held_out.truncate(n);
            }
            let train_images: Vec<Image> = split.train.into_iter().take(64).map(|n| n.image).collect();
            if train_images.is_empty() {
                return Err(Error::EmptyRegion("training split for the learned probe"));
            }
            let detector = train_copy_fill_detector(&train_images, seed, &DetectorConfig::default())?;
            let cfg = EvalConfig {
                buckets,
                jpeg_qf,
                seed,
                ..EvalConfig::default()
            };
            let pyramid = trainer.pyramid.clone();
            let report = antiforensic_eval(Some(&mut trainer.nets), &pyramid, &detector, &held_out, &cfg)?;
            report.save(&out_report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
