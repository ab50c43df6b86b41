//! Command-line front end; all real work lives in the library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use bagnet::data::{load_gray_image, parse_manifest, resize_bilinear, synth_dataset};
use bagnet::gradcheck::{gradcheck_mode, GRADCHECK_COORDS, GRADCHECK_EPS, GRADCHECK_SEED};
use bagnet::metrics::threshold;
use bagnet::model::{bagnet_forward, load_checkpoint, BagnetConfig, Hooks, Mode};
use bagnet::tensor::{Graph, Shape, Tensor};
use bagnet::train::{evaluate, train, EvalOptions, TrainConfig};
use bagnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bagnet",
    about = "Two-branch guidance-network segmentation: synth data, train, evaluate, predict, gradcheck"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic-lesion dataset with a manifest.
    Synth {
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        /// Image size as HxW (e.g. 64x64) or one number for square.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (images/, masks/, manifest.tsv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (k-fold cross-validation by default; folds=1 trains on all).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config file with optional "train" and "model" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where checkpoints, run_record.json and metrics.csv go.
        #[arg(long)]
        out_dir: PathBuf,
        /// Train only this fold of the split.
        #[arg(long, conflicts_with = "all_folds")]
        fold: Option<usize>,
        /// Train every fold (the default).
        #[arg(long)]
        all_folds: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint over a manifest and write the metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Write boundary-overlay PNGs into this directory.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Skip samples that fail to load instead of aborting.
        #[arg(long)]
        skip_errors: bool,
    },
    /// Segment one image with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output mask PNG (binary, 255 = lesion).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences; exits nonzero
    /// above tolerance (1e-3 at 32-bit, 1e-6 at 64-bit).
    Gradcheck {
        /// Use the narrow 4/8-channel, 16x16 configuration.
        #[arg(long)]
        tiny_config: bool,
        /// Check at 64-bit precision (default is 32-bit).
        #[arg(long)]
        f64: bool,
        #[arg(long, default_value_t = GRADCHECK_EPS)]
        eps: f64,
        #[arg(long, default_value_t = GRADCHECK_SEED)]
        seed: u64,
        /// Number of sampled parameter coordinates.
        #[arg(long, default_value_t = GRADCHECK_COORDS)]
        samples: usize,
    },
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// On-disk JSON config: both sections optional, all fields defaulted.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    model: BagnetConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { n, size, seed, out } => {
            let size = parse_size(&size)?;
            let manifest = synth_dataset(n, size, seed, &out)?;
            println!(
                "wrote {} samples at {}x{} under {}",
                manifest.samples.len(),
                size.0,
                size.1,
                out.display()
            );
            println!("manifest: {}", out.join("manifest.tsv").display());
        }
        Command::Train {
            manifest,
            config,
            out_dir,
            fold,
            all_folds: _,
            overrides,
        } => {
            let mut file_config = read_config(config.as_deref())?;
            apply_overrides(&mut file_config.train, &overrides);
            let data = parse_manifest(&manifest)?.resolved(manifest_dir(&manifest));
            for (id, path) in data.missing_files() {
                eprintln!("warning: sample '{id}' file missing: {}", path.display());
            }
            let out = train(
                &data,
                &file_config.model,
                &file_config.train,
                Some(&out_dir),
                fold,
            )?;
            for f in &out.record.folds {
                println!(
                    "fold {}: final train BCE {:.6} over {} epochs, {} eval images",
                    f.fold,
                    f.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    f.epoch_losses.len(),
                    f.metrics.len()
                );
            }
            let agg = &out.record.aggregate;
            println!(
                "dice {:.4} +/- {:.4} | jaccard {:.4} +/- {:.4} (mean +/- std over folds)",
                agg.mean.dice, agg.std.dice, agg.mean.jaccard, agg.std.jaccard
            );
            println!("artifacts in {}", out_dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            overlays,
            threshold,
            skip_errors,
        } => {
            let data = parse_manifest(&manifest)?.resolved(manifest_dir(&manifest));
            let options = EvalOptions {
                threshold,
                skip_errors,
                overlays_dir: overlays,
            };
            let result = evaluate(&checkpoint, &data, &options, Some(&out))?;
            for (id, err) in &result.skipped {
                eprintln!("skipped '{id}': {err}");
            }
            println!(
                "evaluated {} images -> {} (dice {:.4} +/- {:.4})",
                result.rows.len(),
                out.display(),
                result.summary.mean.dice,
                result.summary.std.dice
            );
        }
        Command::Predict {
            checkpoint,
            image,
            out,
        } => {
            predict(&checkpoint, &image, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck {
            tiny_config,
            f64: use_f64,
            eps,
            seed,
            samples,
        } => {
            let config = if tiny_config {
                BagnetConfig::tiny()
            } else {
                BagnetConfig::default().with_input_size(16, 16)
            };
            let bits = if use_f64 { 64 } else { 32 };
            let check = gradcheck_mode(&config, bits, seed, samples, eps)?;
            println!(
                "gradcheck {} bits, {} coordinates, eps {:.1e}, seed {}",
                check.bits, check.n_coords, check.eps, check.seed
            );
            if let Some(w) = check.report.worst() {
                println!(
                    "worst coordinate {}: analytic {:.6e}, numeric {:.6e}",
                    w.index, w.analytic, w.numeric
                );
            }
            println!(
                "max relative error {:.3e} (tolerance {:.0e}): {}",
                check.report.max_rel_err,
                check.tolerance,
                if check.passed() { "PASS" } else { "FAIL" }
            );
            if !check.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Config(format!("cannot parse size component '{s}'")))
    };
    match text.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let s = parse(text)?;
            Ok((s, s))
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_overrides(config: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        config.epochs = v;
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = o.folds {
        config.folds = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
}

fn predict(checkpoint: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let mut loaded = load_checkpoint(checkpoint, None)?;
    let (h, w) = loaded.params.config.input_size;
    let (pixels, iw, ih) = load_gray_image(image_path)?;
    let scaled: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
    let resized = resize_bilinear(&scaled, iw, ih, w, h);
    let tensor = Tensor::new(Shape::new(1, 1, h, w)?, resized)?;

    let mut g = Graph::new();
    let x = g.constant(tensor);
    let pass = bagnet_forward(&mut g, &mut loaded.params, x, Mode::Infer, &Hooks::default())?;
    let binary = threshold(g.value(pass.mask), 0.5)?;

    let img = image::GrayImage::from_fn(w as u32, h as u32, |px, py| {
        let v = binary.at(0, 0, py as usize, px as usize);
        image::Luma([if v == 1.0 { 255u8 } else { 0 }])
    });
    img.save(out).map_err(|e| Error::Image {
        path: out.into(),
        message: e.to_string(),
    })
}
