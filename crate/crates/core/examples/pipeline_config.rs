//! Load a configuration file and print the per-structure settings.
//!
//! ```text
//! cargo run --example pipeline_config -- [config/example.toml]
//! ```

use oarseg::io::{load_config, PipelineConfig};
use oarseg::pipeline::locnet_input;

fn main() -> oarseg::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    println!("crop window {:?}, locator input {:?}", cfg.crop_window, locnet_input(cfg.crop_window));
    println!("{:<14} {:>15} {:>12} {:>15} group", "structure", "box", "locator box", "segnet input");
    for s in &cfg.structures {
        println!(
            "{:<14} {:>15} {:>12} {:>15} {}",
            s.id.name(),
            format!("{:?}", s.box_size),
            format!("{:?}", s.loc_box_size()),
            format!("{:?}", s.segnet_input()),
            s.crop_group.number()
        );
    }
    println!("training: {} epochs, batch {}, Adam lr {}", cfg.train.epochs, cfg.train.batch, cfg.train.adam.learning_rate);
    Ok(())
}
