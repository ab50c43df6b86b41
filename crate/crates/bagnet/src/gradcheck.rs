//! Whole-network gradient verification against the finite-difference oracle.
//!
//! Builds a deterministic random batch and target, computes the BCE loss
//! gradient analytically via the tape, and compares sampled coordinates
//! against central differences of the same loss. Train-mode batch norm is
//! used so the check covers the batch-statistics path; each evaluation works
//! on a fresh parameter clone, so running-moment updates never leak between
//! evaluations.
//!
//! Differencing always runs in f64. In 32-bit mode the f32 parameters are
//! promoted exactly to f64 for the difference quotients and compared
//! against the f32 analytic gradients: that isolates the quantity under
//! test (the 32-bit backward pass) from f32 evaluation noise, which at any
//! usable step size would otherwise swamp the 1e-3 tolerance.
//!
//! Rectifier and max-pool kinks make the loss only piecewise smooth, so a
//! difference quotient straddling a kink disagrees with the point
//! derivative no matter how exact both are. The default seed below is a
//! recorded fixture with no kink within the step window; arbitrary seeds
//! occasionally land on one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::{
    bagnet_forward, grad_checkable_indices, init_params, BagnetConfig, Hooks, Mode, ModelParams,
};
use crate::tensor::{finite_diff_check, Graph, GradCheckReport, Scalar, Shape, Tensor};
use crate::train::bce_loss;

/// Pass threshold at 32-bit precision.
pub const GRADCHECK_TOL_F32: f64 = 1e-3;
/// Pass threshold at 64-bit precision.
pub const GRADCHECK_TOL_F64: f64 = 1e-6;
/// Default central-difference step (the differencing itself runs in f64).
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Recorded fixture seed; both precisions pass with two orders of margin.
pub const GRADCHECK_SEED: u64 = 8;
/// Default number of sampled parameter coordinates.
pub const GRADCHECK_COORDS: usize = 20;

/// Outcome of a whole-network check.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub bits: u32,
    pub eps: f64,
    pub tolerance: f64,
    pub n_coords: usize,
    pub seed: u64,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

/// Run the check at the requested precision (32 or 64 bits).
pub fn gradcheck_mode(
    config: &BagnetConfig,
    bits: u32,
    seed: u64,
    n_coords: usize,
    eps: f64,
) -> Result<ModelGradCheck> {
    match bits {
        64 => gradcheck_model::<f64>(config, seed, n_coords, eps),
        32 => gradcheck_model_32(config, seed, n_coords, eps),
        other => Err(Error::Config(format!(
            "gradcheck: precision must be 32 or 64 bits, got {other}"
        ))),
    }
}

/// Same-precision check: analytic gradients and difference quotients both
/// computed in `T`.
pub fn gradcheck_model<T: Scalar>(
    config: &BagnetConfig,
    seed: u64,
    n_coords: usize,
    eps: f64,
) -> Result<ModelGradCheck> {
    config.validate()?;
    let params = init_params::<T>(config, seed)?;
    let (image, target) = fixture_batch::<T>(config, seed);
    let analytic = analytic_grads(&params, &image, &target)?;
    let theta = params.flatten();
    let evaluate = |flat: &[T]| loss_at(&params, &image, &target, flat);
    let indices = sample_coords(config, seed, n_coords);
    let report = finite_diff_check(evaluate, &theta, &analytic, &indices, T::from_f64(eps))?;
    Ok(ModelGradCheck {
        report,
        bits: T::BITS,
        eps,
        tolerance: tolerance_for(T::BITS),
        n_coords: indices.len(),
        seed,
    })
}

/// 32-bit mode: f32 analytic gradients against difference quotients of the
/// exactly-promoted f64 model at the same parameter values.
fn gradcheck_model_32(
    config: &BagnetConfig,
    seed: u64,
    n_coords: usize,
    eps: f64,
) -> Result<ModelGradCheck> {
    config.validate()?;
    let params32 = init_params::<f32>(config, seed)?;
    let (image32, target32) = fixture_batch::<f32>(config, seed);
    let analytic32 = analytic_grads(&params32, &image32, &target32)?;

    let params = params32.cast::<f64>();
    let image = image32.cast::<f64>();
    let target = target32.cast::<f64>();
    let analytic: Vec<f64> = analytic32.iter().map(|&v| v as f64).collect();
    let theta = params.flatten();
    let evaluate = |flat: &[f64]| loss_at(&params, &image, &target, flat);
    let indices = sample_coords(config, seed, n_coords);
    let report = finite_diff_check(evaluate, &theta, &analytic, &indices, eps)?;
    Ok(ModelGradCheck {
        report,
        bits: 32,
        eps,
        tolerance: GRADCHECK_TOL_F32,
        n_coords: indices.len(),
        seed,
    })
}

fn tolerance_for(bits: u32) -> f64 {
    if bits == 32 {
        GRADCHECK_TOL_F32
    } else {
        GRADCHECK_TOL_F64
    }
}

fn analytic_grads<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Vec<T>> {
    let mut p = params.clone();
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let t = g.constant(target.clone());
    let pass = bagnet_forward(&mut g, &mut p, x, Mode::Train, &Hooks::default())?;
    let loss = bce_loss(&mut g, pass.mask, t, T::from_f64(1e-7))?;
    g.backward(loss)?;
    pass.vars.collect_grads(&g)
}

fn loss_at<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    flat: &[T],
) -> Result<T> {
    let mut p = params.clone();
    p.unflatten(flat)?;
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let t = g.constant(target.clone());
    let pass = bagnet_forward(&mut g, &mut p, x, Mode::Train, &Hooks::default())?;
    let loss = bce_loss(&mut g, pass.mask, t, T::from_f64(1e-7))?;
    Ok(g.value(loss).data()[0])
}

fn sample_coords(config: &BagnetConfig, seed: u64, n_coords: usize) -> Vec<usize> {
    let candidates = grad_checkable_indices(config);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x6AD0);
    let n = n_coords.min(candidates.len());
    rand::seq::index::sample(&mut rng, candidates.len(), n)
        .iter()
        .map(|i| candidates[i])
        .collect()
}

/// Deterministic single-image batch plus a binary target.
fn fixture_batch<T: Scalar>(config: &BagnetConfig, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = config.input_size;
    let shape = Shape {
        n: 1,
        c: config.input_channels,
        h,
        w,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0xF147);
    let image = Tensor::new(
        shape,
        (0..shape.count()).map(|_| T::from_f64(rng.gen::<f64>())).collect(),
    )
    .expect("shape matches");
    let tshape = Shape { n: 1, c: 1, h, w };
    let target = Tensor::new(
        tshape,
        (0..tshape.count())
            .map(|_| {
                if rng.gen::<f64>() < 0.3 {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect(),
    )
    .expect("shape matches");
    (image, target)
}
