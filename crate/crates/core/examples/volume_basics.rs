//! Grids, boxes, cropping with padding, and connected components.

use oarseg::volume::{connected_components, crop_or_pad, paste, BBox, Connectivity, Mask};

fn main() -> oarseg::Result<()> {
    // Two blobs touching only at a corner, plus a lone voxel.
    let m = Mask::from_fn([8, 8, 8], [1.0; 3], |x, y, z| {
        (x < 2 && y < 2 && z < 2) || ((2..4).contains(&x) && (2..4).contains(&y) && (2..4).contains(&z)) || (x, y, z) == (7, 7, 7)
    })?;
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        let c = connected_components(&m, conn);
        println!("{conn:?}: {} components, sizes {:?}", c.sizes.len(), c.sizes);
    }

    // A window hanging off the low corner is padded with the fill value.
    let window = BBox::new([-2, -2, -2], [6, 6, 6]);
    let cut = crop_or_pad(&m, window, false);
    println!("window {window}: {} of {} voxels set", cut.count(), cut.len());

    // Pasting it back at the same place restores the covered region.
    let mut back = Mask::filled(m.dims(), m.spacing(), false)?;
    paste(&mut back, &cut, window.min);
    println!("restored {} voxels, centroid {:?}", back.count(), back.centroid());
    Ok(())
}
