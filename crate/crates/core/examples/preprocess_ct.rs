//! Resample an anisotropic CT to 1 mm, crop the fixed window, normalise and
//! downsample for the locator.

use oarseg::preprocess::{
    compute_crop_box, downsample_factor, normalize_intensity, resample_isotropic, resampled_len, CropGroup, CropSpec,
    Interpolation,
};
use oarseg::volume::{crop_or_pad, Volume};

fn main() -> oarseg::Result<()> {
    // Typical clinical in-plane sizes after resampling.
    for spacing in [0.76, 0.98, 1.27] {
        println!("512 voxels at {spacing} mm -> {} at 1 mm", resampled_len(512, spacing, 1.0));
    }

    // A small synthetic scan: 3 mm slices, a bright sphere in soft tissue.
    let raw = Volume::from_fn([96, 96, 40], [0.8, 0.8, 3.0], |x, y, z| {
        let d = ((x as f64 * 0.8 - 38.0).powi(2) + (y as f64 * 0.8 - 38.0).powi(2) + (z as f64 * 3.0 - 60.0).powi(2)).sqrt();
        if d < 15.0 { 400.0 } else { 40.0 }
    })?;
    let iso = resample_isotropic(&raw, 1.0, Interpolation::Cubic)?;
    println!("raw {:?} @ {:?} mm -> iso {:?}", raw.dims(), raw.spacing(), iso.dims());

    for group in [CropGroup::One, CropGroup::Two] {
        let spec = CropSpec::for_group(group);
        let b = compute_crop_box(iso.dims(), &spec);
        let cropped = normalize_intensity(&crop_or_pad(&iso, b, -1000.0));
        let low = downsample_factor(&cropped, [4, 4, 4])?;
        println!("group {}: window {b} -> {:?}, locator input {:?}", group.number(), cropped.dims(), low.dims());
    }
    Ok(())
}
