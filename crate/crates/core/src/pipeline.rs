//! Per-structure two-stage pipeline: training sets, training loops and
//! inference from a raw CT volume to a mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::locator::{locate_box, make_loc_target, scale_box_up, target_box};
use crate::nn::{bce_loss, sigmoid, AdamConfig, AdamState, Mode, Tensor5, UNetConfig, UNetModel};
use crate::preprocess::{
    compute_crop_box, downsample_factor, downsample_mask, normalize_intensity, resample_isotropic,
    resample_mask_isotropic, resampled_len, upsample_repeat, CropGroup, CropSpec, Interpolation, HU_MIN,
};
use crate::volume::{
    connected_components, crop_or_pad, paste, BBox, Connectivity, Dims, Grid, Mask, StructureId, Volume,
};
use crate::{Error, Result};

/// Downsampling factor between the cropped frame and the locator input.
pub const LOC_FACTOR: usize = 4;

/// Isotropic voxel size, in mm, of the working frame.
pub const TARGET_SPACING_MM: f64 = 1.0;

/// Constants for one organ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub id: StructureId,
    /// Segmentation window in voxels of the cropped frame.
    pub box_size: [usize; 3],
    pub crop_group: CropGroup,
    /// Halve z (mean pooling) before the segmentation network.
    pub segnet_z_halved: bool,
    pub prob_threshold: f32,
}

impl StructureConfig {
    pub fn default_for(id: StructureId) -> Self {
        use StructureId::*;
        let (box_size, crop_group) = match id {
            Mandible => ([144, 144, 112], CropGroup::Two),
            ParotidL | ParotidR => ([96, 96, 96], CropGroup::Two),
            Brainstem => ([56, 56, 80], CropGroup::One),
            SubmandL | SubmandR => ([48, 48, 64], CropGroup::Two),
            OpticNerveL | OpticNerveR => ([56, 56, 24], CropGroup::One),
            Chiasm => ([32, 32, 16], CropGroup::One),
        };
        Self {
            id,
            box_size,
            crop_group,
            segnet_z_halved: id == Mandible,
            prob_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.box_size.iter().any(|&s| s == 0 || s % 8 != 0) {
            return Err(Error::config(
                format!("structures.{}.box_size", self.id),
                format!("{:?} must be positive multiples of 8", self.box_size),
            ));
        }
        if self.segnet_z_halved && !self.box_size[2].is_multiple_of(16) {
            return Err(Error::config(
                format!("structures.{}.box_size", self.id),
                "z must be a multiple of 16 when halved",
            ));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::config(
                format!("structures.{}.prob_threshold", self.id),
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }

    /// Box size in the locator frame.
    pub fn loc_box_size(&self) -> [usize; 3] {
        self.box_size.map(|s| s / LOC_FACTOR)
    }

    /// Spatial dims the segmentation network sees.
    pub fn segnet_input(&self) -> Dims {
        let [h, w, k] = self.box_size;
        if self.segnet_z_halved {
            [h, w, k / 2]
        } else {
            [h, w, k]
        }
    }
}

/// Locator input dims for a crop window.
pub fn locnet_input(window: Dims) -> Dims {
    window.map(|w| w / LOC_FACTOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the training cases.
    pub epochs: usize,
    /// Cases per step; only 1 is supported.
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Random shift, in voxels, of segmentation windows during training.
    pub augment_jitter: usize,
    pub base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 1,
            seed: 0,
            adam: AdamConfig::default(),
            augment_jitter: 0,
            base_channels: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch != 1 {
            return Err(Error::config("train.batch", "only a batch size of 1 is supported"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("train.base_channels", "must be >= 1"));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::config("train.adam", format!("invalid hyperparameters {a:?}")));
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig::with_base_channels(self.base_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Loc,
    Seg,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Loc => "loc",
            Stage::Seg => "seg",
        }
    }
}

/// A CT image resampled to the working spacing, cropped and normalised,
/// with its crop window in isotropic coordinates.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub image: Volume,
    pub crop_box: BBox,
    /// Dims of the isotropic volume before cropping.
    pub iso_dims: Dims,
}

/// Resample to 1 mm, crop with the group margins and normalise.
pub fn prepare_image(raw: &Volume, crop: &CropSpec) -> Result<PreparedImage> {
    let iso = if raw.spacing() == [TARGET_SPACING_MM; 3] {
        raw.clone()
    } else {
        resample_isotropic(raw, TARGET_SPACING_MM, Interpolation::Cubic)?
    };
    let crop_box = compute_crop_box(iso.dims(), crop);
    let cropped = crop_or_pad(&iso, crop_box, HU_MIN);
    Ok(PreparedImage {
        image: normalize_intensity(&cropped),
        crop_box,
        iso_dims: iso.dims(),
    })
}

/// The mask counterpart of [`prepare_image`] (nearest-neighbour resampling).
pub fn prepare_mask(raw: &Mask, crop: &CropSpec) -> Result<Mask> {
    let iso = if raw.spacing() == [TARGET_SPACING_MM; 3] {
        raw.clone()
    } else {
        resample_mask_isotropic(raw, TARGET_SPACING_MM)?
    };
    Ok(crop_or_pad(&iso, compute_crop_box(iso.dims(), crop), false))
}

/// Cut the segmentation window out of the cropped image.
pub fn extract_target_volume(image: &Volume, bbox: BBox, cfg: &StructureConfig) -> Result<Volume> {
    if bbox.size != cfg.box_size {
        return Err(Error::config(
            format!("structures.{}.box_size", cfg.id),
            format!("window {:?} differs from the configured {:?}", bbox.size, cfg.box_size),
        ));
    }
    if !bbox.fits_within(image.dims()) {
        return Err(Error::Range(format!("window {bbox} leaves the frame {:?}", image.dims())));
    }
    let window = crop_or_pad(image, bbox, 0.0);
    if cfg.segnet_z_halved {
        downsample_factor(&window, [1, 1, 2])
    } else {
        Ok(window)
    }
}

fn extract_target_mask(gt: &Mask, bbox: BBox, cfg: &StructureConfig) -> Result<Mask> {
    let window = crop_or_pad(gt, bbox, false);
    if cfg.segnet_z_halved {
        downsample_mask(&window, [1, 1, 2])
    } else {
        Ok(window)
    }
}

/// Drop 26-connected components holding less than 10% of the foreground.
pub fn postprocess_islands(m: &Mask) -> Mask {
    let total = m.count();
    let comps = connected_components(m, Connectivity::TwentySix);
    // Component ids start at 1; 0 is background.
    let keep: Vec<bool> = std::iter::once(false)
        .chain(comps.sizes.iter().map(|&n| 10 * n >= total))
        .collect();
    comps.labels.map(|&l| keep[l as usize])
}

/// One training pair in the cropped frame.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub name: String,
    pub image: Volume,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNetModel<f32>,
    /// Loss of every optimisation step, in order.
    pub loss_trace: Vec<f64>,
}

fn to_tensor(v: &Volume) -> Tensor5<f32> {
    Tensor5::from_grid(v)
}

fn jittered(bbox: BBox, jitter: usize, frame: Dims, rng: &mut ChaCha8Rng) -> BBox {
    if jitter == 0 {
        return bbox;
    }
    let j = jitter as i64;
    let min = [0, 1, 2].map(|a| {
        let hi = (frame[a] - bbox.size[a]) as isize;
        (bbox.min[a] + rng.random_range(-j..=j) as isize).clamp(0, hi)
    });
    BBox::new(min, bbox.size)
}

/// Train the locator or the segmenter of one structure.
///
/// One case per step, visiting every usable case once per epoch in an
/// order shuffled from `tcfg.seed`. Cases with an empty mask are skipped.
/// With zero epochs the freshly initialised model is returned.
pub fn train_stage(stage: Stage, cases: &[TrainCase], cfg: &StructureConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    let unet = tcfg.unet();
    let usable: Vec<&TrainCase> = cases
        .iter()
        .filter(|c| {
            let empty = c.mask.count() == 0;
            if empty {
                log::warn!("{}: empty {} mask, skipped", c.name, cfg.id);
            }
            !empty
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Train(format!("no case has a non-empty {} mask", cfg.id)));
    }
    for c in &usable {
        if c.image.dims() != c.mask.dims() {
            return Err(Error::Dims {
                left: c.image.dims(),
                right: c.mask.dims(),
            });
        }
    }
    let frame = usable[0].image.dims();
    let input_dims = match stage {
        Stage::Loc => locnet_input(frame),
        Stage::Seg => cfg.segnet_input(),
    };
    unet.check_input(input_dims)?;

    // Locator samples never change; build them once.
    let loc_samples = match stage {
        Stage::Loc => usable
            .iter()
            .map(|c| {
                let x = downsample_factor(&c.image, [LOC_FACTOR; 3])?;
                let (_, y) = make_loc_target(&c.mask, cfg.box_size, LOC_FACTOR)?;
                Ok((to_tensor(&x), to_tensor(&y.to_volume())))
            })
            .collect::<Result<Vec<_>>>()?,
        Stage::Seg => Vec::new(),
    };
    let seg_boxes = match stage {
        Stage::Seg => usable
            .iter()
            .map(|c| target_box(&c.mask, cfg.box_size))
            .collect::<Result<Vec<_>>>()?,
        Stage::Loc => Vec::new(),
    };

    let mut model = UNetModel::<f32>::new(unet, tcfg.seed)?;
    let mut adam = AdamState::for_model(tcfg.adam, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = Vec::with_capacity(tcfg.epochs * usable.len());
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = match stage {
                Stage::Loc => loc_samples[i].clone(),
                Stage::Seg => {
                    let c = usable[i];
                    let bbox = jittered(seg_boxes[i], tcfg.augment_jitter, frame, &mut rng);
                    let x = extract_target_volume(&c.image, bbox, cfg)?;
                    let y = extract_target_mask(&c.mask, bbox, cfg)?;
                    (to_tensor(&x), to_tensor(&y.to_volume()))
                }
            };
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, grad) = bce_loss(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "{} {}: loss became {loss} at epoch {epoch} on {}",
                    cfg.id,
                    stage.name(),
                    usable[i].name
                )));
            }
            let (grads, _) = model.backward(&cache, &grad);
            adam.step_model(&mut model, &grads);
            trace.push(loss);
        }
        log::debug!(
            "{} {} epoch {epoch}: mean loss {:.5}",
            cfg.id,
            stage.name(),
            trace[trace.len() - usable.len()..].iter().sum::<f64>() / usable.len() as f64
        );
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Both networks of one structure plus everything needed to run them.
#[derive(Clone, Debug)]
pub struct PipelineModel {
    pub structure: StructureConfig,
    pub crop: CropSpec,
    pub locnet: UNetModel<f32>,
    pub segnet: UNetModel<f32>,
}

impl PipelineModel {
    pub fn new(structure: StructureConfig, crop: CropSpec, locnet: UNetModel<f32>, segnet: UNetModel<f32>) -> Result<Self> {
        structure.validate()?;
        crop.validate()?;
        if (0..3).any(|a| structure.box_size[a] > crop.window[a]) {
            return Err(Error::config(
                format!("structures.{}.box_size", structure.id),
                format!("{:?} exceeds the crop window {:?}", structure.box_size, crop.window),
            ));
        }
        if crop.window.iter().any(|w| w % LOC_FACTOR != 0) {
            return Err(Error::config("crop.window", format!("{:?} must be divisible by {LOC_FACTOR}", crop.window)));
        }
        locnet.config.check_input(locnet_input(crop.window))?;
        segnet.config.check_input(structure.segnet_input())?;
        Ok(Self {
            structure,
            crop,
            locnet,
            segnet,
        })
    }
}

/// Everything [`infer_structure`] produces.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Mask in the cropped isotropic frame.
    pub mask_iso: Mask,
    /// Mask on the original image grid.
    pub mask_raw: Mask,
    /// Crop window in the isotropic volume.
    pub crop_box: BBox,
    /// Located box in the locator frame.
    pub loc_box: BBox,
    /// Segmentation window in the cropped frame.
    pub bbox: BBox,
}

fn predict(model: &UNetModel<f32>, input: &Volume, threshold: f32) -> Result<Mask> {
    let logits = model.forward(&to_tensor(input), Mode::Eval)?;
    let probs = logits.map(|z| sigmoid(z as f64) as f32);
    Ok(probs.to_grid(0, 0, input.spacing()).threshold(threshold))
}

/// Locate the structure with the locator network and return the window in
/// the cropped frame.
pub fn locate_in_frame(image: &Volume, model: &PipelineModel) -> Result<(BBox, BBox)> {
    let cfg = &model.structure;
    let low = downsample_factor(image, [LOC_FACTOR; 3])?;
    let loc_mask = predict(&model.locnet, &low, cfg.prob_threshold)?;
    let loc_box = locate_box(&loc_mask, cfg.loc_box_size())?;
    let bbox = scale_box_up(loc_box, LOC_FACTOR, image.dims())?;
    Ok((loc_box, bbox))
}

/// Run the full flow on a raw CT volume (HU, any spacing).
pub fn infer_structure(image_raw: &Volume, model: &PipelineModel) -> Result<Inference> {
    let cfg = &model.structure;
    let prepared = prepare_image(image_raw, &model.crop)?;
    let (loc_box, bbox) = locate_in_frame(&prepared.image, model)?;
    let target = extract_target_volume(&prepared.image, bbox, cfg)?;
    let mut window = predict(&model.segnet, &target, cfg.prob_threshold)?;
    if cfg.segnet_z_halved {
        window = upsample_repeat(&window, [1, 1, 2]);
    }
    let window = postprocess_islands(&window);
    let mut mask_iso = Mask::filled(prepared.image.dims(), prepared.image.spacing(), false)?;
    paste(&mut mask_iso, &window, bbox.min);
    let mask_raw = to_raw_grid(&mask_iso, prepared.crop_box, prepared.iso_dims, image_raw)?;
    Ok(Inference {
        mask_iso,
        mask_raw,
        crop_box: prepared.crop_box,
        loc_box,
        bbox,
    })
}

/// Nearest-neighbour transfer of a cropped-frame mask back onto the raw grid.
pub fn to_raw_grid(mask_iso: &Mask, crop_box: BBox, iso_dims: Dims, raw: &Volume) -> Result<Mask> {
    let sp = raw.spacing();
    let dims = mask_iso.dims();
    let iso_index = |a: usize, r: usize| -> isize {
        let i = (r as f64 * sp[a] / TARGET_SPACING_MM).round() as isize;
        i.min(iso_dims[a] as isize - 1)
    };
    Grid::from_fn(raw.dims(), sp, |x, y, z| {
        let c = [
            iso_index(0, x) - crop_box.min[0],
            iso_index(1, y) - crop_box.min[1],
            iso_index(2, z) - crop_box.min[2],
        ];
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]) && mask_iso.get(c[0] as usize, c[1] as usize, c[2] as usize)
    })
}

/// Dims of the isotropic volume a raw image resamples to.
pub fn iso_dims(raw_dims: Dims, spacing: [f64; 3]) -> Dims {
    [0, 1, 2].map(|a| resampled_len(raw_dims[a], spacing[a], TARGET_SPACING_MM))
}
