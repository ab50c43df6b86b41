//! Save a model plus optimizer state, load it back and confirm the
//! round-trip is bit-exact, down to identical forward passes.

use bagnet::model::{
    bagnet_forward, init_params, load_checkpoint, param_count, save_checkpoint, BagnetConfig,
    Hooks, Mode,
};
use bagnet::tensor::{Graph, Shape, Tensor};
use bagnet::train::AdamState;

fn main() -> bagnet::Result<()> {
    let config = BagnetConfig::tiny();
    let mut params = init_params::<f32>(&config, 99)?;
    let mut adam = AdamState::new(param_count(&config));
    adam.t = 17;

    let path = std::env::temp_dir().join("bagnet_example.ckpt");
    save_checkpoint(&params, Some(&adam), &path)?;
    let bytes = std::fs::metadata(&path).map_err(|e| bagnet::Error::io(&path, e))?.len();
    println!("checkpoint: {} ({bytes} bytes)", path.display());

    let mut loaded = load_checkpoint(&path, Some(&config))?;
    let same_params = params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        == loaded.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    println!("parameters bit-identical: {same_params}");
    println!(
        "optimizer state restored: t={} ({} moment entries)",
        loaded.optimizer.as_ref().unwrap().t,
        loaded.optimizer.as_ref().unwrap().m.len()
    );

    let forward = |params: &mut bagnet::model::ModelParams<f32>| -> bagnet::Result<Vec<u32>> {
        let shape = Shape::new(1, 1, 16, 16)?;
        let image = Tensor::new(
            shape,
            (0..shape.count()).map(|i| (i as f32 * 0.37).sin().abs()).collect(),
        )?;
        let mut g = Graph::new();
        let x = g.constant(image);
        let pass = bagnet_forward(&mut g, params, x, Mode::Infer, &Hooks::default())?;
        Ok(g.value(pass.mask).data().iter().map(|v| v.to_bits()).collect())
    };
    let identical = forward(&mut params)? == forward(&mut loaded.params)?;
    println!("forward passes bit-identical: {identical}");
    Ok(())
}
