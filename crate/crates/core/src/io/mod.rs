//! On-disk formats: NRRD volumes, model files and TOML configuration.

pub mod config;
pub mod model;
pub mod nrrd;

pub use config::{load_config, parse_config, PipelineConfig};
pub use model::{decode_model, encode_model, load_model, save_model, ModelMeta};
pub use nrrd::{read_image, read_mask, read_volume, write_mask, write_volume, ElementType, VolumeData};
