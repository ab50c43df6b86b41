//! Verify the whole network's analytic gradients against central finite
//! differences, at both precisions, on the narrow 4/8-channel config.

use bagnet::gradcheck::{gradcheck_mode, GRADCHECK_COORDS, GRADCHECK_EPS, GRADCHECK_SEED};
use bagnet::model::BagnetConfig;

fn main() -> bagnet::Result<()> {
    let config = BagnetConfig::tiny();
    for bits in [32u32, 64] {
        let started = std::time::Instant::now();
        let check = gradcheck_mode(&config, bits, GRADCHECK_SEED, GRADCHECK_COORDS, GRADCHECK_EPS)?;
        println!(
            "{} bits: max relative error {:.3e} over {} coordinates (tolerance {:.0e}) -> {} [{:.2?}]",
            bits,
            check.report.max_rel_err,
            check.n_coords,
            check.tolerance,
            if check.passed() { "PASS" } else { "FAIL" },
            started.elapsed()
        );
        if let Some(w) = check.report.worst() {
            println!(
                "  worst coordinate {}: analytic {:+.6e} vs numeric {:+.6e}",
                w.index, w.analytic, w.numeric
            );
        }
    }
    Ok(())
}
