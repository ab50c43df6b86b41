//! Build a small computation on the gradient tape, run the reverse pass and
//! verify a few coordinates against the finite-difference oracle.

use bagnet::tensor::{finite_diff_check, Graph, Shape, Tensor};

fn main() -> bagnet::Result<()> {
    // loss = mean(sigmoid(x * x + 2x)) over four values
    let shape = Shape::new(1, 1, 2, 2)?;
    let values = [0.5, -1.25, 2.0, 0.1];
    let build = |data: &[f64]| -> bagnet::Result<(Graph<f64>, bagnet::tensor::Var, f64)> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_f64(shape, data)?, true);
        let sq = g.mul(x, x)?;
        let lin = g.affine(x, 2.0, 0.0)?;
        let sum = g.add(sq, lin)?;
        let sig = g.sigmoid(sum)?;
        let loss = g.mean_all(sig)?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        Ok((g, x, value))
    };

    let (g, x, loss) = build(&values)?;
    println!("loss = {loss:.6}");
    println!("analytic gradient: {:?}", g.grad(x).unwrap());

    let analytic = g.grad(x).unwrap().to_vec();
    let report = finite_diff_check(
        |theta: &[f64]| build(theta).map(|(_, _, v)| v),
        &values,
        &analytic,
        &[0, 1, 2, 3],
        1e-6,
    )?;
    for c in &report.checks {
        println!(
            "coordinate {}: analytic {:+.8}, numeric {:+.8}, rel err {:.2e}",
            c.index, c.analytic, c.numeric, c.rel_err
        );
    }
    println!("max relative error: {:.3e}", report.max_rel_err);
    Ok(())
}
