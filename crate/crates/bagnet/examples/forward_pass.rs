//! Full forward pass through the two-branch network on a random image,
//! reporting the mask statistics and each guidance block's attention range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use bagnet::model::{bagnet_forward, init_params, param_count, BagnetConfig, Hooks, Mode};
use bagnet::tensor::{Graph, Shape, Tensor};

fn main() -> bagnet::Result<()> {
    let config = BagnetConfig::default();
    println!(
        "network: {} full-scale convs ({}ch) + {} multi-scale convs ({}ch), {} guidance blocks",
        config.full_scale_depth,
        config.full_scale_channels,
        config.multi_scale_depth,
        config.multi_scale_channels,
        config.n_bgb
    );
    println!("learnable parameters: {}", param_count(&config));

    let mut params = init_params::<f32>(&config, 3)?;
    let shape = Shape::new(1, 1, 64, 64)?;
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let image = Tensor::new(shape, (0..shape.count()).map(|_| rng.gen::<f32>()).collect())?;

    let mut g = Graph::new();
    let x = g.constant(image);
    let started = std::time::Instant::now();
    let pass = bagnet_forward(&mut g, &mut params, x, Mode::Infer, &Hooks::default())?;
    let elapsed = started.elapsed();

    let mask = g.value(pass.mask);
    let (lo, hi) = mask
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mean: f32 = mask.data().iter().sum::<f32>() / mask.data().len() as f32;
    println!(
        "mask {} in ({lo:.4}, {hi:.4}), mean {mean:.4}, forward took {elapsed:.2?}",
        mask.shape()
    );

    for (i, block) in pass.bgbs.iter().enumerate() {
        let a = g.value(block.alpha_full);
        let b = g.value(block.alpha_multi);
        let range = |t: &Tensor<f32>| {
            t.data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (alo, ahi) = range(a);
        let (blo, bhi) = range(b);
        println!(
            "block {i}: alpha(full->multi) {} in [{alo:.3}, {ahi:.3}] | alpha(multi->full) {} in [{blo:.3}, {bhi:.3}]",
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}
