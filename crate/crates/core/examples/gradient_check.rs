//! Central-difference gradient checks of every layer and a tiny U-Net.
//!
//! ```text
//! cargo run --release --example gradient_check -- [seed]
//! ```

use oarseg::nn::gradcheck::run_suite;

fn main() {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    for c in run_suite(seed) {
        println!(
            "{:<20} {:.2e} (limit {:.0e}) over {} coordinates, {} skipped at kinks",
            c.name, c.report.max_rel_error, c.tolerance, c.report.checked, c.report.excluded
        );
        assert!(c.passed(), "{} failed", c.name);
    }
}
