//! Run a single bidirectional guidance block and inspect what it computes:
//! the resampled cross-branch features, both attention maps and the
//! calibrated outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use bagnet::model::{bgb_forward, init_params, BagnetConfig, Hooks, Mode, ModelVars};
use bagnet::tensor::{Graph, Shape, Tensor};

fn random_tensor(shape: Shape, rng: &mut ChaCha12Rng) -> Tensor<f32> {
    Tensor::new(shape, (0..shape.count()).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn main() -> bagnet::Result<()> {
    let config = BagnetConfig::default();
    let mut params = init_params::<f32>(&config, 7)?;
    let mut g = Graph::new();
    let vars = ModelVars::stage(&mut g, &params, false);

    // full-scale features at 64x64, multi-scale features one level down
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let full = g.constant(random_tensor(Shape::new(1, 32, 64, 64)?, &mut rng));
    let multi = g.constant(random_tensor(Shape::new(1, 64, 32, 32)?, &mut rng));

    let block = 1; // scale gap 1 in the stage schedule
    let out = bgb_forward(
        &mut g,
        full,
        multi,
        &mut params.bgbs[block],
        &vars.bgbs[block],
        1,
        Mode::Infer,
        &Hooks::default(),
    )?;

    let describe = |name: &str, v: bagnet::tensor::Var, g: &Graph<f32>| {
        let t = g.value(v);
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        println!("{name:<22} {}  values in [{lo:.4}, {hi:.4}]", t.shape());
    };
    describe("full features", full, &g);
    describe("multi features", multi, &g);
    describe("fused multi", out.fused_multi, &g);
    describe("fused full", out.fused_full, &g);
    describe("attention (full->multi)", out.alpha_full, &g);
    describe("attention (multi->full)", out.alpha_multi, &g);
    describe("calibrated multi", out.multi_out, &g);
    describe("calibrated full", out.full_out, &g);
    Ok(())
}
