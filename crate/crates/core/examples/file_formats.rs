//! NRRD volumes and model files: write, read back, and reject damage.

use oarseg::io::{load_model, read_volume, save_model, write_volume, ElementType, ModelMeta, VolumeData};
use oarseg::nn::{UNetConfig, UNetModel};
use oarseg::pipeline::{Stage, StructureConfig};
use oarseg::preprocess::{CropGroup, CropSpec};
use oarseg::volume::{StructureId, Volume};

fn main() -> oarseg::Result<()> {
    let dir = std::env::temp_dir().join("oarseg_file_formats");
    std::fs::create_dir_all(&dir).expect("temp dir");

    let v = Volume::from_fn([10, 8, 6], [0.9, 0.9, 2.5], |x, y, z| (x * 100) as f32 - (y * z) as f32)?;
    for (element, name) in [(ElementType::I16, "ct_i16.nrrd"), (ElementType::F32, "ct_f32.nrrd")] {
        let path = dir.join(name);
        write_volume(&v, element, &path)?;
        let back = read_volume(&path)?.into_volume();
        println!("{name}: lossless = {}", back == v);
    }
    let mask = v.threshold(300.0);
    oarseg::io::write_mask(&mask, dir.join("mask.nrrd"))?;
    if let VolumeData::Mask(m) = read_volume(dir.join("mask.nrrd"))? {
        println!("mask.nrrd: {} voxels, lossless = {}", m.count(), m == mask);
    }

    let unet = UNetConfig::with_base_channels(2);
    let model = UNetModel::<f32>::new(unet, 1)?;
    let meta = ModelMeta {
        stage: Stage::Seg,
        unet,
        structure: StructureConfig::default_for(StructureId::Chiasm),
        crop: CropSpec::for_group(CropGroup::One),
    };
    let path = dir.join("chiasm_seg.bin");
    save_model(&model, &meta, &path)?;
    println!("model roundtrip exact = {}", load_model(&path)?.1 == model);

    let mut bytes = std::fs::read(&path).expect("model bytes");
    bytes[100] ^= 1;
    std::fs::write(&path, &bytes).expect("write damaged copy");
    println!("damaged model: {}", load_model(&path).unwrap_err());
    Ok(())
}
