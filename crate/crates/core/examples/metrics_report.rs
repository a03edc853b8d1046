//! Overlap and surface-distance scores for two shifted spheres, printed as
//! a report record.

use oarseg::metrics::{dsc_ppv_sen, hd95, EvalFrame, MetricsReport};
use oarseg::volume::{Mask, StructureId};

fn sphere(c: [f64; 3], r: f64) -> oarseg::Result<Mask> {
    Mask::from_fn([40, 40, 20], [1.0, 1.0, 2.0], |x, y, z| {
        let p = [x as f64, y as f64, 2.0 * z as f64];
        (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
    })
}

fn main() -> oarseg::Result<()> {
    let gt = sphere([20.0, 20.0, 20.0], 8.0)?;
    for shift in [0.0, 1.0, 3.0] {
        let pred = sphere([20.0 + shift, 20.0, 20.0], 8.0)?;
        let o = dsc_ppv_sen(&pred, &gt)?;
        println!("shift {shift} mm: DSC {:.3}  PPV {:.3}  SEN {:.3}  95HD {:.2} mm", o.dsc, o.ppv, o.sen, hd95(&pred, &gt)?);
    }
    let empty = Mask::filled(gt.dims(), gt.spacing(), false)?;
    let r = MetricsReport::compute("missed", StructureId::Chiasm, &empty, &gt, EvalFrame::Raw)?;
    println!("{}", serde_json::to_string(&r).expect("report serializes"));
    Ok(())
}
