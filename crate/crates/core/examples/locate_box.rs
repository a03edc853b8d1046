//! Slide a fixed-size box over a binary volume with an integral image and
//! check it against brute force.

use oarseg::locator::{box_count, build_integral, locate_box, locate_box_exhaustive, scale_box_up};
use oarseg::volume::{BBox, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> oarseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = Mask::from_fn([24, 24, 14], [1.0; 3], |x, y, z| {
        let blob = (8..16).contains(&x) && (10..18).contains(&y) && (4..9).contains(&z);
        blob || rng.random_bool(0.02)
    })?;
    let size = [9, 9, 7];
    let fast = locate_box(&m, size)?;
    let slow = locate_box_exhaustive(&m, size)?;
    let integral = build_integral(&m);
    println!("integral image: {fast} holding {} voxels", box_count(&integral, fast)?);
    println!("exhaustive:     {slow}");
    assert_eq!(fast, slow);

    // The mandible box found in the 4x downsampled frame, scaled back up.
    let low = BBox::new([20, 30, 14], [36, 36, 28]);
    println!("locator box {low} -> {}", scale_box_up(low, 4, [384, 384, 224])?);
    Ok(())
}
