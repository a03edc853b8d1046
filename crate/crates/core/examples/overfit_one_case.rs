//! Fit the segmenter to a single phantom case and segment it again.

use oarseg::experiment::ExperimentConfig;
use oarseg::locator::target_box;
use oarseg::metrics::dsc_ppv_sen;
use oarseg::phantom::generate_case;
use oarseg::pipeline::{prepare_image, prepare_mask, train_stage, Stage, TrainCase};
use oarseg::volume::crop_or_pad;
use oarseg::nn::{sigmoid, Mode, Tensor5};

fn main() -> oarseg::Result<()> {
    let mut cfg = ExperimentConfig::phantom_default();
    cfg.train.epochs = 300;
    cfg.train.adam.learning_rate = 1e-2;
    let id = cfg.structure.id;
    let case = generate_case(&cfg.phantom, 0)?;
    let one = TrainCase {
        name: "case_000".into(),
        image: prepare_image(&case.image, &cfg.crop)?.image,
        mask: prepare_mask(&case.masks[&id], &cfg.crop)?,
    };
    let out = train_stage(Stage::Seg, std::slice::from_ref(&one), &cfg.structure, &cfg.train)?;
    for (i, l) in out.loss_trace.iter().enumerate().step_by(50) {
        println!("epoch {i:>3}: loss {l:.4}");
    }
    println!("final loss {:.5}", out.loss_trace.last().unwrap());

    let bbox = target_box(&one.mask, cfg.structure.box_size)?;
    let window = crop_or_pad(&one.image, bbox, 0.0);
    let logits = out.model.forward(&Tensor5::from_grid(&window), Mode::Eval)?;
    let pred = logits.map(|z| sigmoid(z as f64) as f32).to_grid(0, 0, window.spacing()).threshold(0.5);
    let gt = crop_or_pad(&one.mask, bbox, false);
    println!("self DSC {:.3}", dsc_ppv_sen(&pred, &gt)?.dsc);
    Ok(())
}
