//! Overlap and surface-distance scores between a prediction and a reference.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::volume::{overlap_counts, Mask, StructureId};
use crate::{Error, Result};

/// Dice, positive predictive value and sensitivity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dsc: f64,
    pub ppv: f64,
    pub sen: f64,
}

/// Overlap scores of `pred` against `gt`.
///
/// Both empty scores (1, 1, 1). Any ratio with an empty denominator is 0.
pub fn dsc_ppv_sen(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    let c = overlap_counts(pred, gt)?;
    if c.a == 0 && c.b == 0 {
        return Ok(Overlap {
            dsc: 1.0,
            ppv: 1.0,
            sen: 1.0,
        });
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Overlap {
        dsc: ratio(2 * c.intersection, c.a + c.b),
        ppv: ratio(c.intersection, c.a),
        sen: ratio(c.intersection, c.b),
    })
}

/// Foreground voxels with a face neighbour in the background. Voxels on the
/// edge of the grid always count.
pub fn surface_mask(m: &Mask) -> Mask {
    let [nx, ny, nz] = m.dims();
    let mut out = m.map(|_| false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let (x, y, z) = (x as isize, y as isize, z as isize);
                let interior = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    .iter()
                    .all(|&(dx, dy, dz)| m.get_signed(x + dx, y + dy, z + dz) == Some(true));
                if !interior {
                    out.set(x as usize, y as usize, z as usize, true);
                }
            }
        }
    }
    out
}

/// Surface voxel centres in millimetres.
pub fn surface_points(m: &Mask) -> Vec<[f64; 3]> {
    let s = surface_mask(m);
    let sp = m.spacing();
    s.data()
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| {
            let c = s.coords(i);
            [0, 1, 2].map(|a| c[a] as f64 * sp[a])
        })
        .collect()
}

/// 1-based nearest-rank index `ceil(p n)`, clamped to `[1, n]`.
fn nearest_rank(p: f64, n: usize) -> usize {
    ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

fn percentile(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    values[nearest_rank(p, values.len()) - 1]
}

/// p-th percentile over `x` of the distance to the nearest point of `y`,
/// computed over all pairs.
pub fn directed_hd_p(x: &[[f64; 3]], y: &[[f64; 3]], p: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    let nearest: Vec<f64> = x
        .iter()
        .map(|a| {
            y.iter()
                .map(|b| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Ok(percentile(nearest, p))
}

/// Squared distance transform of one line: `d[p] = min_q (h (p - q))^2 + f[q]`.
fn edt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let r = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    if !started {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance, in mm², from every voxel to the nearest
/// `true` voxel of `m` (infinite when `m` is empty).
pub fn squared_distance_map(m: &Mask) -> Vec<f64> {
    let dims = m.dims();
    let sp = m.spacing();
    let mut d: Vec<f64> = m.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let longest = *dims.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base = i * stride[a] + j * stride[b];
                for t in 0..n {
                    line[t] = d[base + t * stride[axis]];
                }
                edt_line(&line[..n], sp[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[base + t * stride[axis]] = out[t];
                }
            }
        }
    }
    d
}

/// Directed percentile distance from the surface of `from` to the surface of
/// `to`, via a distance transform of `to`'s surface.
fn directed_surface_hd(from: &Mask, to: &Mask, p: f64) -> Option<f64> {
    let a = surface_mask(from);
    let b = surface_mask(to);
    let dist = squared_distance_map(&b);
    let values: Vec<f64> = a
        .data()
        .iter()
        .zip(&dist)
        .filter(|(&on, _)| on)
        .map(|(_, &d)| d.sqrt())
        .collect();
    if values.is_empty() || values[0].is_infinite() {
        return None;
    }
    Some(percentile(values, p))
}

/// Symmetric 95th-percentile Hausdorff distance between mask surfaces, in mm.
///
/// Infinite when exactly one mask is empty, zero when both are.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    hd_percentile(pred, gt, 0.95)
}

pub fn hd_percentile(pred: &Mask, gt: &Mask, p: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dims {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    if pred.spacing() != gt.spacing() {
        return Err(Error::Shape(format!(
            "spacing mismatch: {:?} vs {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    let (np, ng) = (pred.count(), gt.count());
    if np == 0 && ng == 0 {
        return Ok(0.0);
    }
    if np == 0 || ng == 0 {
        return Ok(f64::INFINITY);
    }
    let ab = directed_surface_hd(pred, gt, p).unwrap_or(f64::INFINITY);
    let ba = directed_surface_hd(gt, pred, p).unwrap_or(f64::INFINITY);
    Ok((ab + ba) / 2.0)
}

/// Which grid the scores were computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFrame {
    /// Isotropic, cropped pipeline frame.
    Iso,
    /// Original image grid.
    Raw,
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case: String,
    pub structure: StructureId,
    pub dsc: f64,
    #[serde(serialize_with = "ser_distance", deserialize_with = "de_distance")]
    pub hd95: f64,
    pub ppv: f64,
    pub sen: f64,
    pub pred_voxels: u64,
    pub gt_voxels: u64,
    pub frame: EvalFrame,
}

impl MetricsReport {
    pub fn compute(case: &str, structure: StructureId, pred: &Mask, gt: &Mask, frame: EvalFrame) -> Result<Self> {
        let o = dsc_ppv_sen(pred, gt)?;
        Ok(Self {
            case: case.to_owned(),
            structure,
            dsc: o.dsc,
            hd95: hd95(pred, gt)?,
            ppv: o.ppv,
            sen: o.sen,
            pred_voxels: pred.count(),
            gt_voxels: gt.count(),
            frame,
        })
    }
}

// JSON has no infinity; a missed structure is written as the string "inf".
fn ser_distance<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_distance<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad distance `{t}`"))),
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Per-structure aggregate of many reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub structure: StructureId,
    pub cases: usize,
    pub dsc: MeanSd,
    pub hd95: MeanSd,
    pub ppv: MeanSd,
    pub sen: MeanSd,
}

/// Group reports by structure, in first-seen order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<Summary> {
    let mut order: Vec<StructureId> = Vec::new();
    for r in reports {
        if !order.contains(&r.structure) {
            order.push(r.structure);
        }
    }
    order
        .into_iter()
        .map(|structure| {
            let rows: Vec<&MetricsReport> = reports.iter().filter(|r| r.structure == structure).collect();
            let col = |f: fn(&MetricsReport) -> f64| MeanSd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            Summary {
                structure,
                cases: rows.len(),
                dsc: col(|r| r.dsc),
                hd95: col(|r| r.hd95),
                ppv: col(|r| r.ppv),
                sen: col(|r| r.sen),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const ONE: [f64; 3] = [1.0; 3];

    fn cube(dims: [usize; 3], min: [usize; 3], side: usize) -> Mask {
        Mask::from_fn(dims, ONE, |x, y, z| {
            let p = [x, y, z];
            (0..3).all(|a| p[a] >= min[a] && p[a] < min[a] + side)
        })
        .unwrap()
    }

    fn voxel(dims: [usize; 3], spacing: [f64; 3], p: [usize; 3]) -> Mask {
        let mut m = Mask::filled(dims, spacing, false).unwrap();
        m.set(p[0], p[1], p[2], true);
        m
    }

    #[test]
    fn overlap_conventions() {
        let a = cube([6, 6, 6], [1, 1, 1], 2);
        let o = dsc_ppv_sen(&a, &a).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (1.0, 1.0, 1.0));
        let b = cube([6, 6, 6], [4, 4, 4], 2);
        let o = dsc_ppv_sen(&a, &b).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (0.0, 0.0, 0.0));
        let shifted = cube([6, 6, 6], [2, 1, 1], 2);
        let o = dsc_ppv_sen(&a, &shifted).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (0.5, 0.5, 0.5));

        let empty = Mask::filled([6, 6, 6], ONE, false).unwrap();
        let o = dsc_ppv_sen(&empty, &empty).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (1.0, 1.0, 1.0));
        let o = dsc_ppv_sen(&empty, &a).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (0.0, 0.0, 0.0));
        let o = dsc_ppv_sen(&a, &empty).unwrap();
        assert_eq!((o.dsc, o.ppv, o.sen), (0.0, 0.0, 0.0));
        assert!(matches!(
            dsc_ppv_sen(&a, &Mask::filled([6, 6, 5], ONE, false).unwrap()),
            Err(Error::Dims { .. })
        ));
    }

    #[test]
    fn surface_of_simple_shapes() {
        let single = voxel([5, 5, 5], [0.5, 1.0, 2.0], [1, 2, 3]);
        assert_eq!(surface_points(&single), vec![[0.5, 2.0, 6.0]]);
        let c = cube([5, 5, 5], [1, 1, 1], 3);
        let pts = surface_points(&c);
        assert_eq!(pts.len(), 26);
        assert!(!pts.contains(&[2.0, 2.0, 2.0]));
        assert!(surface_points(&Mask::filled([3, 3, 3], ONE, false).unwrap()).is_empty());
        // The grid edge is background.
        assert_eq!(surface_points(&Mask::filled([3, 3, 3], ONE, true).unwrap()).len(), 26);
    }

    #[test]
    fn directed_distance_examples() {
        let y = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]];
        assert_eq!(directed_hd_p(&y[..2], &y, 0.95).unwrap(), 0.0);
        assert_eq!(directed_hd_p(&[[0.0; 3]], &[[3.0, 0.0, 0.0]], 0.95).unwrap(), 3.0);
        let line: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(directed_hd_p(&line, &[[0.0; 3]], 0.95).unwrap(), 18.0);
        assert!(matches!(directed_hd_p(&[], &line, 0.95), Err(Error::EmptySet)));
        assert!(matches!(directed_hd_p(&line, &[], 0.95), Err(Error::EmptySet)));
    }

    #[test]
    fn nearest_rank_is_exact_at_integer_products() {
        assert_eq!(nearest_rank(0.95, 20), 19);
        assert_eq!(nearest_rank(0.95, 21), 20);
        assert_eq!(nearest_rank(0.95, 1), 1);
        assert_eq!(nearest_rank(1.0, 7), 7);
        assert_eq!(nearest_rank(0.0, 7), 1);
    }

    #[test]
    fn hd95_examples() {
        let a = cube([8, 8, 8], [2, 2, 2], 3);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let empty = Mask::filled([8, 8, 8], ONE, false).unwrap();
        assert_eq!(hd95(&empty, &a).unwrap(), f64::INFINITY);
        assert_eq!(hd95(&a, &empty).unwrap(), f64::INFINITY);
        assert_eq!(hd95(&empty, &empty).unwrap(), 0.0);
        let p = voxel([8, 8, 8], ONE, [1, 1, 1]);
        let q = voxel([8, 8, 8], ONE, [5, 1, 1]);
        assert_eq!(hd95(&p, &q).unwrap(), 4.0);
        let p = voxel([8, 8, 8], [0.5, 0.5, 2.0], [1, 1, 1]);
        let q = voxel([8, 8, 8], [0.5, 0.5, 2.0], [1, 1, 3]);
        assert_eq!(hd95(&p, &q).unwrap(), 4.0);
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let sp = [0.7, 1.3, 2.5];
        let m = Grid::from_fn([7, 6, 5], sp, |_, _, _| rng.random_bool(0.05)).unwrap();
        let pts = surface_points(&m.map(|&b| b));
        let on: Vec<[f64; 3]> = m
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| {
                let c = m.coords(i);
                [0, 1, 2].map(|a| c[a] as f64 * sp[a])
            })
            .collect();
        assert_eq!(pts.len(), on.len());
        let d = squared_distance_map(&m);
        for (i, &di) in d.iter().enumerate() {
            let c = m.coords(i);
            let p = [0, 1, 2].map(|a| c[a] as f64 * sp[a]);
            let want = on
                .iter()
                .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((di - want).abs() < 1e-9, "{c:?}: {di} vs {want}");
        }
    }

    #[test]
    fn report_roundtrips_infinity() {
        let a = cube([6, 6, 6], [1, 1, 1], 2);
        let empty = Mask::filled([6, 6, 6], ONE, false).unwrap();
        let r = MetricsReport::compute("case_000", StructureId::Chiasm, &empty, &a, EvalFrame::Iso).unwrap();
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"hd95\":\"inf\""), "{line}");
        let back: MetricsReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
        let r = MetricsReport::compute("case_000", StructureId::Chiasm, &a, &a, EvalFrame::Raw).unwrap();
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.hd95, 0.0);
    }

    #[test]
    fn summary_mean_and_sd() {
        let s = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.sd), (2.0, 1.0));
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }

    fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
        (1..=max, 1..=max, 1..=max, any::<u64>(), 0.05f64..0.6).prop_map(|(nx, ny, nz, seed, p)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Mask::from_fn([nx, ny, nz], ONE, |_, _, _| rng.random_bool(p)).unwrap();
            let b = Mask::from_fn([nx, ny, nz], ONE, |_, _, _| rng.random_bool(p)).unwrap();
            (a, b)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn hd95_is_symmetric((a, b) in mask_pair(10)) {
            prop_assert_eq!(hd95(&a, &b).unwrap().to_bits(), hd95(&b, &a).unwrap().to_bits());
        }

        #[test]
        fn hd95_matches_all_pairs((a, b) in mask_pair(10)) {
            let (pa, pb) = (surface_points(&a), surface_points(&b));
            prop_assume!(!pa.is_empty() && !pb.is_empty());
            let brute = (directed_hd_p(&pa, &pb, 0.95).unwrap() + directed_hd_p(&pb, &pa, 0.95).unwrap()) / 2.0;
            prop_assert!((hd95(&a, &b).unwrap() - brute).abs() <= 1e-6);
        }

        #[test]
        fn full_percentile_is_classical_hausdorff((a, b) in mask_pair(6)) {
            let (pa, pb) = (surface_points(&a), surface_points(&b));
            prop_assume!(!pa.is_empty() && !pb.is_empty());
            let classical = pa.iter().map(|p| {
                pb.iter().map(|q| ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            }).fold(0.0, f64::max);
            prop_assert_eq!(directed_hd_p(&pa, &pb, 1.0).unwrap(), classical);
        }

        #[test]
        fn dsc_identity((a, b) in mask_pair(8)) {
            let o = dsc_ppv_sen(&a, &b).unwrap();
            if o.ppv + o.sen > 0.0 {
                prop_assert!((o.dsc - 2.0 * o.ppv * o.sen / (o.ppv + o.sen)).abs() <= 1e-12);
            }
        }

        #[test]
        fn translation_invariance((a, b) in mask_pair(6), shift in (1usize..3, 1usize..3, 1usize..3)) {
            // Both placements keep a background margin so the grid edge never
            // touches the masks.
            let d = a.dims();
            let big = d.map(|n| n + 3);
            let embed = |m: &Mask, off: [usize; 3]| Mask::from_fn(big, ONE, |x, y, z| {
                let p = [x, y, z];
                (0..3).all(|k| p[k] >= off[k] && p[k] - off[k] < d[k])
                    && m.get(x - off[0], y - off[1], z - off[2])
            }).unwrap();
            let s = [shift.0, shift.1, shift.2];
            let (a0, b0) = (embed(&a, [1, 1, 1]), embed(&b, [1, 1, 1]));
            let (a1, b1) = (embed(&a, s), embed(&b, s));
            prop_assert_eq!(dsc_ppv_sen(&a0, &b0).unwrap(), dsc_ppv_sen(&a1, &b1).unwrap());
            prop_assert_eq!(hd95(&a0, &b0).unwrap(), hd95(&a1, &b1).unwrap());
        }
    }
}
