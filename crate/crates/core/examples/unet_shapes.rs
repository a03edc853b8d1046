//! Build U-Nets, run forward passes on box-sized inputs and show the
//! multiple-of-eight rule.

use oarseg::nn::{Mode, Tensor5, UNetConfig, UNetModel};

fn main() -> oarseg::Result<()> {
    let cfg = UNetConfig::with_base_channels(2);
    let model = UNetModel::<f32>::new(cfg, 0)?;
    println!(
        "{} levels, base {} channels, {} convolutions, {} parameters",
        cfg.levels,
        cfg.base_channels,
        cfg.conv_layer_count(),
        model.parameter_count()
    );
    for dims in [[32, 32, 16], [56, 56, 24], [48, 48, 64]] {
        let y = model.forward(&Tensor5::filled(1, 1, dims, 0.5), Mode::Eval)?;
        println!("input {dims:?} -> logits {:?}", y.shape());
    }
    match model.forward(&Tensor5::filled(1, 1, [33, 32, 32], 0.5), Mode::Eval) {
        Err(e) => println!("input [33, 32, 32]: {e}"),
        Ok(_) => unreachable!("33 is not a multiple of 8"),
    }
    let full = UNetConfig::default();
    println!("default base {}: {} parameters", full.base_channels, UNetModel::<f32>::zeros(full).parameter_count());
    Ok(())
}
