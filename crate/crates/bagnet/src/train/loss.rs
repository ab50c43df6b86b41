//! Pixelwise binary cross-entropy on the tape.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Mean over all pixels of `-[y*ln(p) + (1-y)*ln(1-p)]`, with `p` clamped to
/// `[clamp_eps, 1-clamp_eps]` before the logarithms. Returns a `(1,1,1,1)`
/// scalar differentiable through the tape.
///
/// `target` must be strictly binary.
pub fn bce_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    clamp_eps: T,
) -> Result<Var> {
    let ps = g.value(pred).shape();
    let ts = g.value(target).shape();
    if ps != ts {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: format!("pred {ps}"),
            rhs: format!("target {ts}"),
        });
    }
    if let Some(bad) = g
        .value(target)
        .data()
        .iter()
        .find(|v| **v != T::zero() && **v != T::one())
    {
        return Err(Error::Numeric(format!(
            "bce_loss: target must be binary, found {bad}"
        )));
    }
    let one = T::one();
    let p = g.clamp(pred, clamp_eps, one - clamp_eps)?;
    let ln_p = g.ln(p)?;
    let hit = g.mul(target, ln_p)?;
    let one_minus_p = g.affine(p, -one, one)?;
    let ln_q = g.ln(one_minus_p)?;
    let one_minus_t = g.affine(target, -one, one)?;
    let miss = g.mul(one_minus_t, ln_q)?;
    let sum = g.add(hit, miss)?;
    let mean = g.mean_all(sum)?;
    g.affine(mean, -one, T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn scalar_loss(pred: &[f64], target: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let shape = Shape::new(1, 1, 1, pred.len()).unwrap();
        let p = g.leaf(Tensor::from_f64(shape, pred).unwrap(), false);
        let t = g.leaf(Tensor::from_f64(shape, target).unwrap(), false);
        let l = bce_loss(&mut g, p, t, 1e-7).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn uniform_half_prediction_costs_ln_two() {
        let loss = scalar_loss(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 1.0, 0.0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn confident_correct_prediction_hand_value() {
        let loss = scalar_loss(&[0.9], &[1.0]);
        assert!((loss - 0.10536051565782628).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn exact_prediction_bottoms_out_at_the_clamp() {
        let loss = scalar_loss(&[1.0, 0.0], &[1.0, 0.0]);
        assert!(loss > 0.0 && loss < 2e-7, "{loss}");
    }

    #[test]
    fn shape_mismatch_and_nonbinary_target_are_errors() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2).unwrap(), 0.5), false);
        let t = g.leaf(Tensor::full(Shape::new(1, 1, 2, 1).unwrap(), 1.0), false);
        assert!(matches!(
            bce_loss(&mut g, p, t, 1e-7),
            Err(Error::ShapeMismatch { .. })
        ));
        let soft = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2).unwrap(), 0.6), false);
        assert!(matches!(bce_loss(&mut g, p, soft, 1e-7), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_matches_closed_form() {
        // d/dp of mean BCE at a single pixel: (p - y) / (p (1 - p))
        let mut g = Graph::<f64>::new();
        let shape = Shape::new(1, 1, 1, 1).unwrap();
        let p = g.leaf(Tensor::from_f64(shape, &[0.3]).unwrap(), true);
        let t = g.leaf(Tensor::from_f64(shape, &[1.0]).unwrap(), false);
        let l = bce_loss(&mut g, p, t, 1e-7).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap()[0];
        let expect = (0.3 - 1.0) / (0.3 * 0.7);
        assert!((grad - expect).abs() < 1e-12, "{grad} vs {expect}");
    }
}
