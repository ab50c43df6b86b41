//! Acceptance suite: one test per gate, each printing a PASS line with the
//! measured numbers (run with `--nocapture` to see them all).

use std::time::Instant;

use bagnet::data::synth_dataset;
use bagnet::gradcheck::{
    gradcheck_mode, GRADCHECK_COORDS, GRADCHECK_EPS, GRADCHECK_SEED, GRADCHECK_TOL_F32,
    GRADCHECK_TOL_F64,
};
use bagnet::metrics::{compute_metrics, confusion, threshold, ConfusionCounts};
use bagnet::model::{bagnet_forward, init_params, BagnetConfig, Hooks, Mode};
use bagnet::tensor::{Graph, Shape, Tensor};
use bagnet::train::{kfold_split, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// 1. Gradient correctness on the tiny config, both precisions.
#[test]
fn acceptance_1_gradient_correctness() {
    let started = Instant::now();
    let config = BagnetConfig::tiny();

    let check64 = gradcheck_mode(&config, 64, GRADCHECK_SEED, GRADCHECK_COORDS, GRADCHECK_EPS)
        .expect("gradcheck f64");
    assert!(
        check64.report.max_rel_err < GRADCHECK_TOL_F64,
        "64-bit max rel err {} >= {GRADCHECK_TOL_F64}",
        check64.report.max_rel_err
    );

    let check32 = gradcheck_mode(&config, 32, GRADCHECK_SEED, GRADCHECK_COORDS, GRADCHECK_EPS)
        .expect("gradcheck f32");
    assert!(
        check32.report.max_rel_err < GRADCHECK_TOL_F32,
        "32-bit max rel err {} >= {GRADCHECK_TOL_F32}",
        check32.report.max_rel_err
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "gradcheck took {elapsed:.1?}");
    println!(
        "ACCEPTANCE 1 gradient correctness: PASS (64-bit {:.3e} < 1e-6, 32-bit {:.3e} < 1e-3, {:.1?})",
        check64.report.max_rel_err, check32.report.max_rel_err, elapsed
    );
}

/// 2. Output shape equals input shape and every value and attention map
///    lies strictly inside (0,1), for all H, W in {16,32,48,64}.
#[test]
fn acceptance_2_shape_and_range() {
    let started = Instant::now();
    let sizes = [16usize, 32, 48, 64];
    let config = BagnetConfig::default();
    let mut params = init_params::<f32>(&config, 5).expect("init");
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for h in sizes {
        for w in sizes {
            let shape = Shape::new(1, 1, h, w).unwrap();
            let image = Tensor::new(
                shape,
                (0..shape.count()).map(|_| rng.gen::<f32>()).collect(),
            )
            .unwrap();
            let mut g = Graph::new();
            let x = g.constant(image);
            let pass = bagnet_forward(&mut g, &mut params, x, Mode::Infer, &Hooks::default())
                .expect("forward");
            let out = g.value(pass.mask);
            assert_eq!(out.shape(), shape, "mask shape at {h}x{w}");
            assert!(
                out.data().iter().all(|&v| v > 0.0 && v < 1.0),
                "mask values outside (0,1) at {h}x{w}"
            );
            assert_eq!(pass.bgbs.len(), 8);
            for (i, block) in pass.bgbs.iter().enumerate() {
                for alpha in [block.alpha_full, block.alpha_multi] {
                    assert!(
                        g.value(alpha).data().iter().all(|&v| v > 0.0 && v < 1.0),
                        "attention map {i} outside (0,1) at {h}x{w}"
                    );
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "shape suite took {elapsed:.1?}");
    println!(
        "ACCEPTANCE 2 shape/range suite: PASS (16 size combinations, {elapsed:.1?})"
    );
}

/// 3. Forcing the attention maps to exactly 1 turns both calibration
///    products into exact identities.
#[test]
fn acceptance_3_calibration_identity() {
    let config = BagnetConfig::tiny();
    let mut params = init_params::<f32>(&config, 11).expect("init");
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let shape = Shape::new(2, 1, 16, 16).unwrap();
    let image = Tensor::new(
        shape,
        (0..shape.count()).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap();
    let mut g = Graph::new();
    let x = g.constant(image);
    let hooks = Hooks { force_alpha: Some(1.0) };
    let pass = bagnet_forward(&mut g, &mut params, x, Mode::Infer, &hooks).expect("forward");
    for (i, block) in pass.bgbs.iter().enumerate() {
        let gated = g.value(block.multi_out).data();
        let fused = g.value(block.fused_multi).data();
        assert!(
            gated.iter().zip(fused).all(|(a, b)| a.to_bits() == b.to_bits()),
            "block {i}: multi-side calibration not exact under alpha = 1"
        );
        let gated = g.value(block.full_out).data();
        let fused = g.value(block.fused_full).data();
        assert!(
            gated.iter().zip(fused).all(|(a, b)| a.to_bits() == b.to_bits()),
            "block {i}: full-side calibration not exact under alpha = 1"
        );
    }
    println!("ACCEPTANCE 3 calibration identity: PASS (bitwise equality across all 8 blocks)");
}

/// 4. Overfit run: 8 synthetic 32x32 samples, 200 Adam steps at the default
///    learning rate; the final training BCE must drop below 10% of the
///    initial one and the training-set Dice must reach 0.95.
#[test]
fn acceptance_4_overfit() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(8, (32, 32), 42, dir.path()).expect("synth");
    let config = TrainConfig {
        epochs: 200, // batch of 8 fits in one step per epoch
        folds: 1,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train(&manifest, &BagnetConfig::default(), &config, None, None).expect("train");
    let losses = &out.record.folds[0].epoch_losses;
    assert_eq!(losses.len(), 200);
    let initial = losses[0];
    let final_ = *losses.last().unwrap();
    let ratio = final_ / initial;
    assert!(
        ratio <= 0.10,
        "final BCE {final_:.6} is {:.1}% of initial {initial:.6}",
        ratio * 100.0
    );
    // min-loss-so-far is nonincreasing by construction; verify it reaches
    // the final level rather than bouncing away
    let min_so_far = losses.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    assert!(min_so_far <= final_ * 1.5);
    // recorded fixture: the run achieves ratio ~0.0051; allow 20% slack
    assert!(
        ratio <= 0.0062,
        "regression against recorded overfit fixture: ratio {ratio:.5} > 0.0062"
    );
    let dice = out.record.aggregate.mean.dice;
    assert!(dice >= 0.95, "training-set dice {dice:.4} < 0.95");
    println!(
        "ACCEPTANCE 4 overfit: PASS (BCE {initial:.4} -> {final_:.4}, ratio {ratio:.4}, dice {dice:.4}, {:.0?})",
        started.elapsed()
    );
}

/// 5. Metrics pipeline equals an independent brute-force oracle exactly on
///    100 random mask pairs; Dice-Jaccard identity; the worked example.
#[test]
fn acceptance_5_metrics_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(500);
    let shape = Shape::new(1, 1, 16, 16).unwrap();
    for case in 0..100 {
        let random_mask = |rng: &mut ChaCha12Rng, p: f64| -> Tensor<f64> {
            Tensor::new(
                shape,
                (0..shape.count())
                    .map(|_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap()
        };
        let p = rng.gen::<f64>();
        let q = rng.gen::<f64>();
        let pred = random_mask(&mut rng, p);
        let gt = random_mask(&mut rng, q);

        // independent oracle: per-pixel double loop over the 2D grid
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                let pv = pred.at(0, 0, y, x) == 1.0;
                let gv = gt.at(0, 0, y, x) == 1.0;
                if pv && gv {
                    tp += 1;
                } else if pv && !gv {
                    fp += 1;
                } else if !pv && gv {
                    fn_ += 1;
                } else {
                    tn += 1;
                }
            }
        }
        let total = (tp + fp + tn + fn_) as f64;
        let oracle_accuracy = (tp + tn) as f64 / total;
        let oracle_jaccard = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        let oracle_precision = if tp + fp == 0 {
            if fn_ == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let oracle_recall = if tp + fn_ == 0 {
            if fp == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let oracle_specificity = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
        let oracle_dice = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };

        let counts = confusion(&pred, &gt).expect("confusion");
        assert_eq!(
            counts,
            ConfusionCounts { tp, fp, tn, fn_ },
            "case {case}: counts disagree with the double-loop oracle"
        );
        let report = compute_metrics(&counts);
        assert_eq!(report.accuracy, oracle_accuracy, "case {case} accuracy");
        assert_eq!(report.jaccard, oracle_jaccard, "case {case} jaccard");
        assert_eq!(report.precision, oracle_precision, "case {case} precision");
        assert_eq!(report.recall, oracle_recall, "case {case} recall");
        assert_eq!(report.specificity, oracle_specificity, "case {case} specificity");
        assert_eq!(report.dice, oracle_dice, "case {case} dice");

        if tp + fp + fn_ > 0 {
            let derived = 2.0 * report.jaccard / (1.0 + report.jaccard);
            assert!(
                (report.dice - derived).abs() < 1e-12,
                "case {case}: dice {} vs 2J/(1+J) {derived}",
                report.dice
            );
        }
        // thresholding an already-binary mask is idempotent
        let re = threshold(&pred, 0.5).unwrap();
        assert_eq!(re.data(), pred.data());
    }

    let worked = compute_metrics(&ConfusionCounts { tp: 1, fp: 0, tn: 2, fn_: 1 });
    assert_eq!(worked.accuracy, 0.75);
    assert_eq!(worked.jaccard, 0.5);
    assert_eq!(worked.precision, 1.0);
    assert_eq!(worked.recall, 0.5);
    assert_eq!(worked.specificity, 1.0);
    assert!((worked.dice - 2.0 / 3.0).abs() < 1e-15);
    println!("ACCEPTANCE 5 metrics oracle: PASS (100 random pairs exact, identity to 1e-12, worked example exact)");
}

/// 6. Fold protocol: 210 samples over three folds split 70/70/70, disjoint
///    and covering, for any seed.
#[test]
fn acceptance_6_fold_protocol() {
    for seed in [0u64, 1, 7, 42, 1234, 987654321] {
        let folds = kfold_split(210, 3, seed).expect("split");
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![70, 70, 70]);
        let mut seen = std::collections::BTreeSet::new();
        for fold in &folds {
            for &i in fold {
                assert!(seen.insert(i), "seed {seed}: duplicate index {i}");
            }
        }
        assert_eq!(seen.len(), 210);
        assert!(seen.iter().all(|&i| i < 210));
    }
    println!("ACCEPTANCE 6 fold protocol: PASS (210 -> 70/70/70 disjoint covering, 6 seeds)");
}

/// 7. Two end-to-end training runs from identical inputs produce
///    byte-identical checkpoints and run records (wall-clock aside).
#[test]
fn acceptance_7_determinism() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(6, (32, 32), 77, data_dir.path()).expect("synth");
    let model = BagnetConfig {
        full_scale_channels: 8,
        multi_scale_channels: 16,
        ..BagnetConfig::default()
    };
    let config = TrainConfig {
        epochs: 2,
        folds: 2,
        batch_size: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |out: &std::path::Path| {
        train(&manifest, &model, &config, Some(out), None).expect("train");
    };
    let out_a = data_dir.path().join("run_a");
    let out_b = data_dir.path().join("run_b");
    run(&out_a);
    run(&out_b);

    for name in ["fold_0.ckpt", "fold_1.ckpt", "metrics.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // run records match byte for byte once the timing field is masked
    let record = |path: &std::path::Path| -> String {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        v["wall_clock_seconds"] = serde_json::json!(0.0);
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(
        record(&out_a.join("run_record.json")),
        record(&out_b.join("run_record.json")),
        "run records differ beyond wall clock"
    );
    println!("ACCEPTANCE 7 determinism: PASS (checkpoints, CSV and records byte-identical)");
}

/// 8. The full-scale reproduction attempt is documented, advisory and
///    excluded from the default suite; the README carries the command and
///    the +/-5-point tolerance.
#[test]
fn acceptance_8_full_scale_reproduction_documented() {
    let readme = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../README.md"
    ))
    .expect("workspace README.md");
    for needle in [
        "busi_malignant.tsv",
        "--folds 3",
        "±5",
        "BUSI_MANIFEST",
        "busi_full_scale_reproduction",
    ] {
        assert!(
            readme.contains(needle),
            "README.md is missing reproduction documentation: {needle:?}"
        );
    }
    println!("ACCEPTANCE 8 reproduction statement: PASS (documented, advisory, excluded from CI)");
}

/// Advisory full-scale reproduction attempt. Not part of the default suite:
/// needs the BUSI malignant subset, a manifest pointing at it (set
/// `BUSI_MANIFEST`), and hours of CPU time. Compares three-fold
/// cross-validation means against the published reference scores with an
/// advisory tolerance of +/-5 points per metric.
#[test]
#[ignore = "requires the BUSI dataset and full-scale training; see README"]
fn busi_full_scale_reproduction() {
    let manifest_path = match std::env::var("BUSI_MANIFEST") {
        Ok(p) => std::path::PathBuf::from(p),
        Err(_) => {
            eprintln!("BUSI_MANIFEST not set; nothing to do");
            return;
        }
    };
    let manifest = bagnet::data::parse_manifest(&manifest_path)
        .expect("parse BUSI manifest")
        .resolved(manifest_path.parent().unwrap_or(std::path::Path::new(".")));
    let out_dir = std::env::temp_dir().join("bagnet_busi_reproduction");
    let config = TrainConfig::default(); // 50 epochs, batch 12, lr 0.001, 3 folds
    let out = train(&manifest, &BagnetConfig::default(), &config, Some(&out_dir), None)
        .expect("train");
    // published reference scores (percent): mean over three folds
    let reference = [
        ("accuracy", 92.60),
        ("jaccard", 59.71),
        ("precision", 75.69),
        ("recall", 76.99),
        ("specificity", 96.46),
        ("dice", 69.93),
    ];
    let got = out.record.aggregate.mean.values();
    for ((name, want), got) in reference.iter().zip(got) {
        let got = got * 100.0;
        let delta = (got - want).abs();
        println!("{name}: got {got:.2}, reference {want:.2}, |delta| {delta:.2} (advisory +/-5)");
        assert!(delta <= 5.0, "{name} deviates more than 5 points");
    }
}
