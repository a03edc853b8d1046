//! Generate synthetic cases and write them in the on-disk case layout.
//!
//! ```text
//! cargo run --release --example phantom_cases -- OUT_DIR [cases]
//! ```

use std::path::PathBuf;

use oarseg::phantom::{generate_case, list_cases, write_cases, PhantomSpec};
use oarseg::volume::StructureId;

fn main() -> oarseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "phantoms".into()));
    let n: u64 = args.next().map_or(3, |s| s.parse().expect("case count must be an integer"));
    let spec = PhantomSpec::standard(StructureId::Brainstem, 42);
    write_cases(&spec, &out, 0, n)?;
    for layout in list_cases(&out)? {
        let image = layout.read_image()?;
        let mask = layout.read_mask(StructureId::Brainstem)?;
        let (lo, hi) = image.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{}: {:?} voxels, HU {lo:.0}..{hi:.0}, brainstem {} voxels at {:?}",
            layout.name(),
            image.dims(),
            mask.count(),
            mask.centroid().map(|c| c.map(|v| v.round()))
        );
    }
    let again = generate_case(&spec, 0)?;
    assert_eq!(again.image, list_cases(&out)?[0].read_image()?);
    println!("case 0 regenerates bit for bit");
    Ok(())
}
