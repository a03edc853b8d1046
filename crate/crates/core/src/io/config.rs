//! TOML pipeline configuration. Every key is optional; see
//! `config/example.toml` for the full set with defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::pipeline::{locnet_input, StructureConfig, TrainConfig, LOC_FACTOR};
use crate::preprocess::{CropGroup, CropSpec, CROP_WINDOW};
use crate::volume::{Dims, StructureId};
use crate::{Error, Result};

/// Validated settings for every structure, training and cropping.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// All nine structures in canonical order.
    pub structures: Vec<StructureConfig>,
    pub train: TrainConfig,
    pub crop_window: Dims,
    pub group1: [[f64; 2]; 3],
    pub group2: [[f64; 2]; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            structures: StructureId::ALL.iter().map(|&id| StructureConfig::default_for(id)).collect(),
            train: TrainConfig::default(),
            crop_window: CROP_WINDOW,
            group1: CropSpec::for_group(CropGroup::One).margin_fracs,
            group2: CropSpec::for_group(CropGroup::Two).margin_fracs,
        }
    }
}

impl PipelineConfig {
    pub fn structure(&self, id: StructureId) -> &StructureConfig {
        self.structures.iter().find(|s| s.id == id).expect("every structure is configured")
    }

    /// Crop placement for a structure's group.
    pub fn crop_spec(&self, group: CropGroup) -> CropSpec {
        CropSpec {
            window: self.crop_window,
            margin_fracs: match group {
                CropGroup::One => self.group1,
                CropGroup::Two => self.group2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.crop_window;
        let unit = LOC_FACTOR * 8;
        if w.iter().any(|&v| v == 0 || v % unit != 0) {
            return Err(Error::config(
                "crop.window",
                format!("{w:?} must be positive multiples of {unit}, so the locator input {:?} divides by 8", locnet_input(w)),
            ));
        }
        for (n, fracs) in [(1, &self.group1), (2, &self.group2)] {
            for (axis, [lo, hi]) in ["x", "y", "z"].iter().zip(fracs.iter()) {
                if *lo < 0.0 || *hi < 0.0 || ((lo + hi) - 1.0).abs() > 1e-9 {
                    return Err(Error::config(
                        format!("crop.group{n}.{axis}"),
                        format!("({lo}, {hi}) must be non-negative and sum to 1"),
                    ));
                }
            }
        }
        // Boxes larger than the window are caught when a structure is
        // trained or run, so small-window setups need not override all nine.
        for s in &self.structures {
            s.validate()?;
        }
        self.train.validate()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    train: TrainConfig,
    crop: RawCrop,
    structures: BTreeMap<String, RawStructure>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawCrop {
    window: Option<Dims>,
    group1: RawMargins,
    group2: RawMargins,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawMargins {
    x: Option<[f64; 2]>,
    y: Option<[f64; 2]>,
    z: Option<[f64; 2]>,
}

impl RawMargins {
    fn apply(&self, base: &mut [[f64; 2]; 3]) {
        for (slot, v) in base.iter_mut().zip([self.x, self.y, self.z]) {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawStructure {
    box_size: Option<[usize; 3]>,
    crop_group: Option<CropGroup>,
    segnet_z_halved: Option<bool>,
    prob_threshold: Option<f32>,
}

/// Parse and validate configuration text; `origin` names it in errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<PipelineConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        context: e
            .span()
            .map(|s| format!("line {}", text[..s.start].lines().count().max(1)))
            .unwrap_or_else(|| "toml".into()),
        message: e.message().to_owned(),
    })?;
    let mut cfg = PipelineConfig {
        train: raw.train,
        ..PipelineConfig::default()
    };
    if let Some(w) = raw.crop.window {
        cfg.crop_window = w;
    }
    raw.crop.group1.apply(&mut cfg.group1);
    raw.crop.group2.apply(&mut cfg.group2);
    for (name, o) in &raw.structures {
        let id: StructureId = name
            .parse()
            .map_err(|_| Error::config(format!("structures.{name}"), "unknown structure"))?;
        let s = cfg.structures.iter_mut().find(|s| s.id == id).expect("all structures present");
        if let Some(v) = o.box_size {
            s.box_size = v;
        }
        if let Some(v) = o.crop_group {
            s.crop_group = v;
        }
        if let Some(v) = o.segnet_z_halved {
            s.segnet_z_halved = v;
        }
        if let Some(v) = o.prob_threshold {
            s.prob_threshold = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
