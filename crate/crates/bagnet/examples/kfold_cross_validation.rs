//! Three-fold cross-validation on synthetic data, end to end: split, train
//! one model per fold, evaluate each held-out fold and aggregate
//! mean +/- std across folds.

use bagnet::data::synth_dataset;
use bagnet::metrics::METRIC_NAMES;
use bagnet::model::BagnetConfig;
use bagnet::train::{kfold_split, train, TrainConfig};

fn main() -> bagnet::Result<()> {
    let folds = kfold_split(210, 3, 0)?;
    println!(
        "210 samples over 3 folds -> sizes {:?}",
        folds.iter().map(Vec::len).collect::<Vec<_>>()
    );

    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = synth_dataset(9, (32, 32), 31, dir.path())?;
    let model = BagnetConfig {
        full_scale_channels: 8,
        multi_scale_channels: 16,
        ..BagnetConfig::default()
    };
    let config = TrainConfig {
        epochs: 25,
        folds: 3,
        batch_size: 6,
        seed: 2,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let out = train(&manifest, &model, &config, None, None)?;
    println!(
        "trained {} folds x {} epochs in {:.1?}",
        out.record.folds.len(),
        config.epochs,
        started.elapsed()
    );
    for fold in &out.record.folds {
        println!(
            "fold {}: final train BCE {:.4}, held-out dice {:.4}",
            fold.fold,
            fold.epoch_losses.last().unwrap(),
            fold.metrics.iter().map(|m| m.report.dice).sum::<f64>() / fold.metrics.len() as f64
        );
    }
    let agg = &out.record.aggregate;
    println!("\nheld-out metrics, mean +/- std over folds:");
    for (name, (mean, std)) in METRIC_NAMES
        .iter()
        .zip(agg.mean.values().into_iter().zip(agg.std.values()))
    {
        println!("  {name:<12} {:>6.2} +/- {:.2}  (percent)", mean * 100.0, std * 100.0);
    }
    Ok(())
}
