//! Train a locator and a segmenter on synthetic cases and score held-out
//! ones.
//!
//! ```text
//! cargo run --release --example phantom_end_to_end -- [epochs] [base_channels]
//! ```

use oarseg::experiment::{run_experiment, ExperimentConfig};

fn main() -> oarseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::phantom_default();
    let mut args = std::env::args().skip(1);
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    if let Some(b) = args.next() {
        cfg.train.base_channels = b.parse().expect("base channels must be an integer");
    }
    let report = run_experiment(&cfg)?;
    for c in &report.cases {
        println!(
            "{}  dsc {:.3}  hd95 {:.2} mm  window holds {:.1}% of the organ",
            c.report.case,
            c.report.dsc,
            c.report.hd95,
            100.0 * c.containment
        );
    }
    println!(
        "mean dsc {:.3}, mean hd95 {:.2} mm, {}/{} windows hold >= 99%, {:.0} s",
        report.mean_dsc(),
        report.mean_hd95(),
        report.contained(0.99),
        report.cases.len(),
        report.seconds
    );
    Ok(())
}
