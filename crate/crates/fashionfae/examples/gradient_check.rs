//! Verify every training loss against central finite differences.

use fashionfae::verify::{loss_grad_checks_exhaustive, GRAD_CHECK_TOLERANCE};

fn main() -> fashionfae::Result<()> {
    println!("checking all five losses against finite differences (seed 0)...");
    let t0 = std::time::Instant::now();
    let reports = loss_grad_checks_exhaustive(0)?;
    for r in &reports {
        let verdict = if r.max_rel_err < GRAD_CHECK_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!("  {:5}  max relative error {:.3e}  {}", r.loss, r.max_rel_err, verdict);
    }
    let overall = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    println!(
        "overall {:.3e} vs tolerance {:.0e} in {:?}",
        overall,
        GRAD_CHECK_TOLERANCE,
        t0.elapsed()
    );
    Ok(())
}
