//! Scaled-down end-to-end run on phantom cases: train both networks for one
//! structure, then evaluate on held-out cases.

use std::time::Instant;

use crate::locator::box_count;
use crate::locator::build_integral;
use crate::metrics::{EvalFrame, MetricsReport};
use crate::phantom::{generate_case, PhantomSpec};
use crate::pipeline::{infer_structure, prepare_image, prepare_mask, train_stage, PipelineModel, Stage, StructureConfig, TrainCase, TrainConfig};
use crate::preprocess::{CropGroup, CropSpec};
use crate::volume::StructureId;
use crate::Result;

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub structure: StructureConfig,
    pub crop: CropSpec,
    pub train: TrainConfig,
    pub train_cases: u64,
    pub test_cases: u64,
}

impl ExperimentConfig {
    /// 20 training and 5 test cases of 64³ at 1 mm, a 32³ segmentation
    /// window and small networks.
    pub fn phantom_default() -> Self {
        let id = StructureId::Brainstem;
        Self {
            phantom: PhantomSpec::standard(id, 2024),
            structure: StructureConfig {
                box_size: [32, 32, 32],
                ..StructureConfig::default_for(id)
            },
            crop: CropSpec {
                window: [64, 64, 64],
                ..CropSpec::for_group(CropGroup::One)
            },
            train: TrainConfig {
                epochs: 30,
                base_channels: 4,
                ..TrainConfig::default()
            },
            train_cases: 20,
            test_cases: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub report: MetricsReport,
    /// Share of ground-truth voxels inside the located window.
    pub containment: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub cases: Vec<CaseResult>,
    pub model: PipelineModel,
    pub loc_loss: Vec<f64>,
    pub seg_loss: Vec<f64>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn mean_dsc(&self) -> f64 {
        self.cases.iter().map(|c| c.report.dsc).sum::<f64>() / self.cases.len() as f64
    }

    pub fn mean_hd95(&self) -> f64 {
        self.cases.iter().map(|c| c.report.hd95).sum::<f64>() / self.cases.len() as f64
    }

    /// Cases whose window holds at least `share` of the ground truth.
    pub fn contained(&self, share: f64) -> usize {
        self.cases.iter().filter(|c| c.containment >= share).count()
    }
}

/// Training cases use seeds `0..train_cases`, test cases the seeds after.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let id = cfg.structure.id;
    let train: Vec<TrainCase> = (0..cfg.train_cases)
        .map(|seed| {
            let case = generate_case(&cfg.phantom, seed)?;
            Ok(TrainCase {
                name: format!("case_{seed:03}"),
                image: prepare_image(&case.image, &cfg.crop)?.image,
                mask: prepare_mask(&case.masks[&id], &cfg.crop)?,
            })
        })
        .collect::<Result<_>>()?;
    let loc = train_stage(Stage::Loc, &train, &cfg.structure, &cfg.train)?;
    log::info!("locator trained, final loss {:.4}", loc.loss_trace.last().copied().unwrap_or(f64::NAN));
    let seg = train_stage(Stage::Seg, &train, &cfg.structure, &cfg.train)?;
    log::info!("segmenter trained, final loss {:.4}", seg.loss_trace.last().copied().unwrap_or(f64::NAN));
    let model = PipelineModel::new(cfg.structure, cfg.crop, loc.model, seg.model)?;

    let mut cases = Vec::new();
    for seed in cfg.train_cases..cfg.train_cases + cfg.test_cases {
        let case = generate_case(&cfg.phantom, seed)?;
        let gt_raw = &case.masks[&id];
        let out = infer_structure(&case.image, &model)?;
        let gt_iso = prepare_mask(gt_raw, &cfg.crop)?;
        let integral = build_integral(&gt_iso);
        let inside = box_count(&integral, out.bbox)?;
        let containment = inside as f64 / integral.total().max(1) as f64;
        let report = MetricsReport::compute(&format!("case_{seed:03}"), id, &out.mask_raw, gt_raw, EvalFrame::Raw)?;
        log::info!("{}: dsc {:.3} hd95 {:.2} contained {:.3}", report.case, report.dsc, report.hd95, containment);
        cases.push(CaseResult { report, containment });
    }
    Ok(ExperimentReport {
        cases,
        model,
        loc_loss: loc.loss_trace,
        seg_loss: seg.loss_trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}
