//! Drop prediction fragments holding less than a tenth of the foreground.

use oarseg::pipeline::postprocess_islands;
use oarseg::volume::Mask;

fn cubes(main: usize, island: usize) -> oarseg::Result<Mask> {
    // `main` voxels in a 10-wide slab at the origin, `island` in a row far away.
    Mask::from_fn([20, 20, 20], [1.0; 3], |x, y, z| {
        let i = x + 10 * (y + 10 * z);
        let in_main = x < 10 && y < 10 && z < 10 && i < main;
        let in_island = z == 19 && y == 19 && x < island;
        in_main || in_island
    })
}

fn main() -> oarseg::Result<()> {
    for (main, island) in [(100, 5), (100, 12), (90, 10)] {
        let m = cubes(main, island)?;
        let kept = postprocess_islands(&m);
        println!(
            "{main} + {island} voxels: island share {:.1}% -> {} voxels kept",
            100.0 * island as f64 / (main + island) as f64,
            kept.count()
        );
    }
    Ok(())
}
