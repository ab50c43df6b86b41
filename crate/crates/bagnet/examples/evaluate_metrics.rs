//! The metrics pipeline on its own: threshold, confusion counts, the six
//! ratios, fold aggregation and the CSV report.

use bagnet::metrics::{
    aggregate_folds, compute_metrics, confusion, threshold, write_metrics_csv, MetricsCsvRow,
};
use bagnet::tensor::{Shape, Tensor};

fn main() -> bagnet::Result<()> {
    // a soft prediction against a crisp ground truth
    let shape = Shape::new(1, 1, 4, 4)?;
    #[rustfmt::skip]
    let probabilities = Tensor::<f64>::from_f64(shape, &[
        0.9, 0.8, 0.6, 0.1,
        0.7, 0.4, 0.3, 0.0,
        0.2, 0.4, 0.6, 0.1,
        0.0, 0.1, 0.2, 0.0,
    ])?;
    #[rustfmt::skip]
    let ground_truth = Tensor::<f64>::from_f64(shape, &[
        1.0, 1.0, 0.0, 0.0,
        1.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
    ])?;

    let predicted = threshold(&probabilities, 0.5)?;
    let counts = confusion(&predicted, &ground_truth)?;
    println!(
        "confusion: tp={} fp={} tn={} fn={}",
        counts.tp, counts.fp, counts.tn, counts.fn_
    );
    let report = compute_metrics(&counts);
    println!(
        "accuracy {:.3}  jaccard {:.3}  precision {:.3}  recall {:.3}  specificity {:.3}  dice {:.3}",
        report.accuracy, report.jaccard, report.precision, report.recall, report.specificity,
        report.dice
    );
    // Dice and Jaccard are locked together: D = 2J / (1 + J)
    println!(
        "dice from jaccard: {:.6} (direct {:.6})",
        2.0 * report.jaccard / (1.0 + report.jaccard),
        report.dice
    );

    // aggregate three synthetic folds and print the CSV report
    let rows = vec![
        MetricsCsvRow { id: "img_0".into(), fold: Some(0), report },
        MetricsCsvRow {
            id: "img_1".into(),
            fold: Some(1),
            report: compute_metrics(&confusion(&ground_truth, &ground_truth)?),
        },
        MetricsCsvRow {
            id: "img_2".into(),
            fold: Some(2),
            report: compute_metrics(&confusion(&predicted, &predicted)?),
        },
    ];
    let agg = aggregate_folds(&[
        vec![rows[0].report],
        vec![rows[1].report],
        vec![rows[2].report],
    ])?;
    println!("\nmean dice over folds {:.4} +/- {:.4}\n", agg.mean.dice, agg.std.dice);

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}
