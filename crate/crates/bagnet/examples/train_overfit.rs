//! Overfit a small synthetic set: the quickest end-to-end sanity check that
//! forward, backward and the optimizer work together. Uses a narrow model
//! so it finishes in well under a minute.

use bagnet::data::synth_dataset;
use bagnet::model::BagnetConfig;
use bagnet::train::{train, TrainConfig};

fn main() -> bagnet::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = synth_dataset(4, (32, 32), 5, dir.path())?;
    let model = BagnetConfig {
        full_scale_channels: 8,
        multi_scale_channels: 16,
        ..BagnetConfig::default()
    };
    let config = TrainConfig {
        epochs: 60,
        folds: 1, // no cross-validation: train and evaluate on everything
        seed: 1,
        ..TrainConfig::default()
    };

    let started = std::time::Instant::now();
    let out = train(&manifest, &model, &config, None, None)?;
    let fold = &out.record.folds[0];
    println!("trained {} steps in {:.1?}", fold.epoch_losses.len(), started.elapsed());
    for (epoch, loss) in fold.epoch_losses.iter().enumerate() {
        if epoch % 10 == 0 || epoch + 1 == fold.epoch_losses.len() {
            println!("epoch {epoch:>3}: BCE {loss:.5}");
        }
    }
    let initial = fold.epoch_losses[0];
    let final_ = *fold.epoch_losses.last().unwrap();
    println!("loss ratio final/initial: {:.3}", final_ / initial);
    println!(
        "training-set dice after overfitting: {:.4}",
        out.record.aggregate.mean.dice
    );
    Ok(())
}
