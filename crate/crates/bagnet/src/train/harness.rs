//! The train/evaluate loops tying data, model, loss and optimizer together.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, bce_loss, kfold_split, AdamState, TrainConfig};
use crate::data::{load_sample, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_folds, compute_metrics, confusion, threshold, write_metrics_csv, FoldAggregate,
    MetricsCsvRow, MetricsReport,
};
use crate::model::{
    bagnet_forward, init_params, load_checkpoint, param_count, save_checkpoint, BagnetConfig,
    Hooks, Mode, ModelParams,
};
use crate::tensor::{Graph, Shape, Tensor};

/// Per-fold training trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    /// Mean training BCE per epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
    /// Held-out per-image metrics (the training set itself when folds = 1).
    pub metrics: Vec<EvalRow>,
    pub checkpoint_file: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub fold: Option<usize>,
    pub report: MetricsReport,
}

/// Everything a run produced, serialized as `run_record.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_config: TrainConfig,
    pub model_config: BagnetConfig,
    pub seed: u64,
    pub folds: Vec<FoldRecord>,
    pub aggregate: FoldAggregate,
    /// Wall-clock duration of the run. The only field that differs between
    /// two otherwise identical runs.
    pub wall_clock_seconds: f64,
}

pub struct TrainOutput {
    pub record: RunRecord,
    /// Final parameters per fold, in fold order.
    pub fold_params: Vec<ModelParams<f32>>,
}

/// Train on a manifest: one model per fold (`folds = 1` trains a single
/// model on everything and evaluates it on the training set). Deterministic
/// for a fixed `(manifest, configs, seed)`. `only_fold` restricts the run
/// to a single fold of the full split.
pub fn train(
    manifest: &DatasetManifest,
    model_config: &BagnetConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    only_fold: Option<usize>,
) -> Result<TrainOutput> {
    let started = Instant::now();
    config.validate()?;
    manifest.validate()?;
    if manifest.samples.is_empty() {
        return Err(Error::Config("cannot train on an empty manifest".into()));
    }
    // the manifest's preprocessing size is the model's working resolution
    let model_config = model_config
        .with_input_size(manifest.target_size.0, manifest.target_size.1);
    model_config.validate()?;

    let data = load_all(manifest)?;
    let n = data.len();
    let fold_eval_sets: Vec<Vec<usize>> = if config.folds == 1 {
        vec![(0..n).collect()]
    } else {
        kfold_split(n, config.folds, config.seed)?
    };

    if let Some(f) = only_fold {
        if f >= fold_eval_sets.len() {
            return Err(Error::Config(format!(
                "fold {f} requested but the split has {} folds",
                fold_eval_sets.len()
            )));
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut folds = Vec::new();
    let mut fold_params = Vec::new();
    let mut per_fold_metrics = Vec::new();
    let mut all_rows = Vec::new();
    for (fold, eval_set) in fold_eval_sets.iter().enumerate() {
        if only_fold.is_some_and(|f| f != fold) {
            continue;
        }
        let train_set: Vec<usize> = if config.folds == 1 {
            (0..n).collect()
        } else {
            (0..n).filter(|i| !eval_set.contains(i)).collect()
        };

        let mut params = init_params::<f32>(&model_config, config.seed + fold as u64)?;
        let mut adam = AdamState::new(param_count(&model_config));
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(fold as u64 + 1);

        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut order = train_set.clone();
            order.shuffle(&mut shuffle_rng);
            let mut weighted_loss = 0.0f64;
            for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
                let loss =
                    train_step(&mut params, &mut adam, config, &data, chunk).map_err(|e| {
                        e.context(format!("fold {fold}, epoch {epoch}, batch {batch_no}"))
                    })?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        fold,
                        epoch,
                        batch: batch_no,
                    });
                }
                weighted_loss += loss * chunk.len() as f64;
            }
            epoch_losses.push(weighted_loss / train_set.len() as f64);
        }

        let mut metrics = Vec::new();
        for &i in eval_set {
            let (image, mask) = &data[i];
            let report = eval_one(&mut params, image, mask, 0.5)?;
            metrics.push(EvalRow {
                id: manifest.samples[i].id.clone(),
                fold: Some(fold),
                report,
            });
        }

        let checkpoint_file = match out_dir {
            Some(dir) => {
                let name = format!("fold_{fold}.ckpt");
                save_checkpoint(&params, Some(&adam), &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };

        per_fold_metrics.push(metrics.iter().map(|r| r.report).collect::<Vec<_>>());
        all_rows.extend(metrics.iter().map(|r| MetricsCsvRow {
            id: r.id.clone(),
            fold: r.fold,
            report: r.report,
        }));
        folds.push(FoldRecord {
            fold,
            epoch_losses,
            metrics,
            checkpoint_file,
        });
        fold_params.push(params);
    }

    let aggregate = aggregate_folds(&per_fold_metrics)?;
    let record = RunRecord {
        train_config: config.clone(),
        model_config,
        seed: config.seed,
        folds,
        aggregate,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        let json_path = dir.join("run_record.json");
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Config(format!("cannot serialize run record: {e}")))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join("metrics.csv");
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &all_rows)?;
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(TrainOutput {
        record,
        fold_params,
    })
}

fn load_all(manifest: &DatasetManifest) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            load_sample(s, manifest.target_size)
                .map_err(|e| e.context(format!("sample '{}'", s.id)))
        })
        .collect()
}

/// One optimization step over a batch of sample indices.
fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    config: &TrainConfig,
    data: &[(Tensor<f32>, Tensor<f32>)],
    chunk: &[usize],
) -> Result<f64> {
    let (image, mask) = stack(data, chunk)?;
    let mut g = Graph::new();
    let x = g.constant(image);
    let t = g.constant(mask);
    let pass = bagnet_forward(&mut g, params, x, Mode::Train, &Hooks::default())?;
    let loss = bce_loss(&mut g, pass.mask, t, config.bce_clamp_eps as f32)?;
    let loss_val = g.value(loss).data()[0] as f64;
    g.backward(loss)?;
    let grads = pass.vars.collect_grads(&g)?;
    let mut flat = params.flatten();
    adam_step(&mut flat, &grads, adam, config)?;
    params.unflatten(&flat)?;
    Ok(loss_val)
}

/// Stack per-sample `(1,1,h,w)` tensors into one `(B,1,h,w)` batch.
fn stack(
    data: &[(Tensor<f32>, Tensor<f32>)],
    chunk: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = &data[chunk[0]].0.shape();
    let shape = Shape::new(chunk.len(), first.c, first.h, first.w)?;
    let mut images = Vec::with_capacity(shape.count());
    let mut masks = Vec::with_capacity(shape.count());
    for &i in chunk {
        images.extend_from_slice(data[i].0.data());
        masks.extend_from_slice(data[i].1.data());
    }
    Ok((Tensor::new(shape, images)?, Tensor::new(shape, masks)?))
}

/// Run inference on one sample and score it against its mask.
fn eval_one(
    params: &mut ModelParams<f32>,
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    thresh: f64,
) -> Result<MetricsReport> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let pass = bagnet_forward(&mut g, params, x, Mode::Infer, &Hooks::default())?;
    let binary = threshold(g.value(pass.mask), thresh)?;
    Ok(compute_metrics(&confusion(&binary, mask)?))
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Skip samples that fail to load instead of aborting.
    pub skip_errors: bool,
    /// Write a boundary-overlay PNG per sample into this directory.
    pub overlays_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            skip_errors: false,
            overlays_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct EvalOutput {
    pub rows: Vec<MetricsCsvRow>,
    pub summary: FoldAggregate,
    /// `(sample id, error)` pairs skipped under `skip_errors`.
    pub skipped: Vec<(String, String)>,
}

/// Evaluate a checkpoint over a manifest and optionally write the CSV.
pub fn evaluate(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    options: &EvalOptions,
    csv_out: Option<&Path>,
) -> Result<EvalOutput> {
    let mut loaded = load_checkpoint(checkpoint, None)?;
    if loaded.params.config.input_size != manifest.target_size {
        return Err(Error::CheckpointConfig(format!(
            "checkpoint was trained at {:?} but the manifest preprocesses to {:?}",
            loaded.params.config.input_size, manifest.target_size
        )));
    }
    evaluate_params(&mut loaded.params, manifest, options, csv_out)
}

/// Evaluate in-memory parameters over a manifest.
pub fn evaluate_params(
    params: &mut ModelParams<f32>,
    manifest: &DatasetManifest,
    options: &EvalOptions,
    csv_out: Option<&Path>,
) -> Result<EvalOutput> {
    manifest.validate()?;
    if let Some(dir) = &options.overlays_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for s in &manifest.samples {
        let (image, mask) = match load_sample(s, manifest.target_size) {
            Ok(pair) => pair,
            Err(e) if options.skip_errors => {
                skipped.push((s.id.clone(), e.to_string()));
                continue;
            }
            Err(e) => return Err(e.context(format!("sample '{}'", s.id))),
        };
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pass = bagnet_forward(&mut g, params, x, Mode::Infer, &Hooks::default())?;
        let binary = threshold(g.value(pass.mask), options.threshold)?;
        let report = compute_metrics(&confusion(&binary, &mask)?);
        if let Some(dir) = &options.overlays_dir {
            let path = dir.join(format!("{}_overlay.png", s.id));
            crate::data::write_boundary_overlay(&path, &image, &binary)?;
        }
        rows.push(MetricsCsvRow {
            id: s.id.clone(),
            fold: s.fold,
            report,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(
            "evaluation produced no rows (empty manifest or everything skipped)".into(),
        ));
    }
    let mut csv = Vec::new();
    let summary = write_metrics_csv(&mut csv, &rows)?;
    if let Some(path) = csv_out {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(EvalOutput {
        rows,
        summary,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn quick_config(epochs: usize, folds: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            folds,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_model() -> BagnetConfig {
        BagnetConfig {
            full_scale_channels: 4,
            multi_scale_channels: 8,
            ..BagnetConfig::default()
        }
    }

    #[test]
    fn train_records_losses_and_metrics_per_fold() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(6, (32, 32), 21, dir.path()).unwrap();
        let out = train(&manifest, &tiny_model(), &quick_config(2, 2), None, None).unwrap();
        assert_eq!(out.record.folds.len(), 2);
        assert_eq!(out.fold_params.len(), 2);
        for fold in &out.record.folds {
            assert_eq!(fold.epoch_losses.len(), 2);
            assert_eq!(fold.metrics.len(), 3);
            assert!(fold.epoch_losses.iter().all(|l| l.is_finite()));
        }
        // config echo
        assert_eq!(out.record.train_config.epochs, 2);
        assert_eq!(out.record.model_config.input_size, (32, 32));
    }

    #[test]
    fn identical_seeds_give_identical_loss_trajectories() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(4, (32, 32), 4, dir.path()).unwrap();
        let run = || {
            train(&manifest, &tiny_model(), &quick_config(2, 1), None, None)
                .unwrap()
                .record
                .folds[0]
                .epoch_losses
                .clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let manifest = DatasetManifest {
            samples: vec![],
            target_size: (32, 32),
            seed: 0,
        };
        assert!(train(&manifest, &tiny_model(), &quick_config(1, 1), None, None).is_err());
    }

    #[test]
    fn evaluate_checkpoint_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(4, (32, 32), 8, dir.path()).unwrap();
        let out_dir = dir.path().join("run");
        train(&manifest, &tiny_model(), &quick_config(1, 1), Some(&out_dir), None).unwrap();
        let ckpt = out_dir.join("fold_0.ckpt");
        assert!(ckpt.exists());
        assert!(out_dir.join("run_record.json").exists());
        assert!(out_dir.join("metrics.csv").exists());

        let result = evaluate(&ckpt, &manifest, &EvalOptions::default(), None).unwrap();
        assert_eq!(result.rows.len(), 4);

        let mismatched = DatasetManifest {
            target_size: (64, 64),
            ..manifest.clone()
        };
        assert!(matches!(
            evaluate(&ckpt, &mismatched, &EvalOptions::default(), None),
            Err(Error::CheckpointConfig(_))
        ));
    }

    #[test]
    fn only_fold_restricts_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(6, (32, 32), 13, dir.path()).unwrap();
        let out = train(&manifest, &tiny_model(), &quick_config(1, 3), None, Some(1)).unwrap();
        assert_eq!(out.record.folds.len(), 1);
        assert_eq!(out.record.folds[0].fold, 1);
        assert_eq!(out.fold_params.len(), 1);
        assert!(matches!(
            train(&manifest, &tiny_model(), &quick_config(1, 3), None, Some(5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_skip_errors_collects_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(3, (32, 32), 19, dir.path()).unwrap();
        // break one sample
        std::fs::remove_file(&manifest.samples[1].image_path).unwrap();
        let mut params =
            crate::model::init_params::<f32>(&tiny_model().with_input_size(32, 32), 0).unwrap();

        let strict = evaluate_params(&mut params, &manifest, &EvalOptions::default(), None);
        let err = strict.unwrap_err().to_string();
        assert!(err.contains(&manifest.samples[1].id), "{err}");

        let lax = EvalOptions {
            skip_errors: true,
            ..EvalOptions::default()
        };
        let out = evaluate_params(&mut params, &manifest, &lax, None).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, manifest.samples[1].id);
    }

    #[test]
    fn ground_truth_as_prediction_scores_one() {
        // oracle evaluation path: feeding each mask through the metrics
        // pipeline against itself must give all ones
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(3, (32, 32), 15, dir.path()).unwrap();
        for s in &manifest.samples {
            let (_, mask) = load_sample(s, manifest.target_size).unwrap();
            let binary = threshold(&mask, 0.5).unwrap();
            let report = compute_metrics(&confusion(&binary, &mask).unwrap());
            assert_eq!(report.values(), [1.0; 6]);
        }
    }

    #[test]
    fn all_background_prediction_has_zero_dice_full_specificity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(2, (32, 32), 16, dir.path()).unwrap();
        for s in &manifest.samples {
            let (_, mask) = load_sample(s, manifest.target_size).unwrap();
            let empty = Tensor::<f32>::zeros(mask.shape());
            let report = compute_metrics(&confusion(&empty, &mask).unwrap());
            assert_eq!(report.dice, 0.0);
            assert_eq!(report.specificity, 1.0);
        }
    }
}
