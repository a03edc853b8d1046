//! Fixed-size box search over a binary localisation map.

use crate::volume::{linear_index, BBox, Dims, Grid, Mask};
use crate::{Error, Result};

/// Prefix counts: `at(i, j, k)` is the number of foreground voxels in
/// `[0,i) x [0,j) x [0,k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegralVolume {
    dims: Dims,
    sums: Vec<u64>,
}

impl IntegralVolume {
    /// Dims of the mask this table was built from.
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> u64 {
        let [nx, ny, _] = self.dims;
        self.sums[(k * (ny + 1) + j) * (nx + 1) + i]
    }

    pub fn total(&self) -> u64 {
        let [nx, ny, nz] = self.dims;
        self.at(nx, ny, nz)
    }
}

pub fn build_integral(m: &Mask) -> IntegralVolume {
    let dims = m.dims();
    let [nx, ny, nz] = dims;
    let (sx, sy) = (nx + 1, ny + 1);
    let mut sums = vec![0u64; sx * sy * (nz + 1)];
    let data = m.data();
    for z in 0..nz {
        for y in 0..ny {
            let mut row = 0u64;
            for x in 0..nx {
                row += data[linear_index(dims, x, y, z)] as u64;
                let here = ((z + 1) * sy + (y + 1)) * sx + (x + 1);
                let below_y = ((z + 1) * sy + y) * sx + (x + 1);
                let below_z = (z * sy + (y + 1)) * sx + (x + 1);
                let below_yz = (z * sy + y) * sx + (x + 1);
                // Row sum plus the (y, z) plane recurrence.
                sums[here] = row + sums[below_y] + sums[below_z] - sums[below_yz];
            }
        }
    }
    IntegralVolume { dims, sums }
}

/// Exact foreground count inside `bbox` by inclusion-exclusion.
pub fn box_count(s: &IntegralVolume, bbox: BBox) -> Result<u64> {
    if bbox.size.contains(&0) || !bbox.fits_within(s.dims) {
        return Err(Error::Range(format!("box {bbox} outside volume {:?}", s.dims)));
    }
    let [x0, y0, z0] = bbox.min_unsigned();
    let [x1, y1, z1] = bbox.max().map(|v| v as usize);
    Ok(corner_sum(s, [x0, y0, z0], [x1, y1, z1]))
}

#[inline]
fn corner_sum(s: &IntegralVolume, lo: [usize; 3], hi: [usize; 3]) -> u64 {
    let [x0, y0, z0] = lo;
    let [x1, y1, z1] = hi;
    // Added and subtracted terms are grouped so every partial result stays
    // non-negative in unsigned arithmetic.
    let plus = s.at(x1, y1, z1) + s.at(x0, y0, z1) + s.at(x0, y1, z0) + s.at(x1, y0, z0);
    let minus = s.at(x0, y1, z1) + s.at(x1, y0, z1) + s.at(x1, y1, z0) + s.at(x0, y0, z0);
    plus - minus
}

/// Accumulates argmax corners in scan order and applies the tie rule.
struct ArgmaxTies {
    best: u64,
    count: u64,
    sum: [u64; 3],
}

impl ArgmaxTies {
    fn new() -> Self {
        Self {
            best: 0,
            count: 0,
            sum: [0; 3],
        }
    }

    fn offer(&mut self, value: u64, corner: [usize; 3]) {
        if self.count == 0 || value > self.best {
            self.best = value;
            self.count = 0;
            self.sum = [0; 3];
        }
        if value == self.best {
            self.count += 1;
            for a in 0..3 {
                self.sum[a] += corner[a] as u64;
            }
        }
    }

    /// Mean corner, halves rounded toward the lower index, clamped to
    /// `[0, limit]`.
    fn corner(&self, limit: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            // ceil(mean - 1/2) == ceil((2 sum - n) / 2n)
            let num = 2 * self.sum[a] as i128 - self.count as i128;
            let den = 2 * self.count as i128;
            let q = num.div_euclid(den) + i128::from(num.rem_euclid(den) != 0);
            q.clamp(0, limit[a] as i128) as usize
        })
    }
}

fn check_box_size(dims: Dims, size: [usize; 3]) -> Result<()> {
    if size.contains(&0) || (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::Range(format!("box size {size:?} does not fit volume {dims:?}")));
    }
    Ok(())
}

/// Slide a cuboid of `size` over `m` and return the position that encloses
/// the most foreground.
///
/// When several positions tie, the result is their mean corner, with halves
/// rounded toward the lower index.
pub fn locate_box(m: &Mask, size: [usize; 3]) -> Result<BBox> {
    let dims = m.dims();
    check_box_size(dims, size)?;
    let s = build_integral(m);
    let limit = [0, 1, 2].map(|a| dims[a] - size[a]);
    let mut ties = ArgmaxTies::new();
    for z in 0..=limit[2] {
        for y in 0..=limit[1] {
            for x in 0..=limit[0] {
                let lo = [x, y, z];
                let hi = [x + size[0], y + size[1], z + size[2]];
                ties.offer(corner_sum(&s, lo, hi), lo);
            }
        }
    }
    Ok(BBox::from_unsigned(ties.corner(limit), size))
}

/// Exhaustive search that counts every candidate box voxel by voxel.
///
/// Same contract as [`locate_box`]; kept as the reference it is tested
/// against.
pub fn locate_box_exhaustive(m: &Mask, size: [usize; 3]) -> Result<BBox> {
    let dims = m.dims();
    check_box_size(dims, size)?;
    let limit = [0, 1, 2].map(|a| dims[a] - size[a]);
    let mut ties = ArgmaxTies::new();
    for z0 in 0..=limit[2] {
        for y0 in 0..=limit[1] {
            for x0 in 0..=limit[0] {
                let mut n = 0u64;
                for z in z0..z0 + size[2] {
                    for y in y0..y0 + size[1] {
                        for x in x0..x0 + size[0] {
                            n += m.get(x, y, z) as u64;
                        }
                    }
                }
                ties.offer(n, [x0, y0, z0]);
            }
        }
    }
    Ok(BBox::from_unsigned(ties.corner(limit), size))
}

/// Map a box from the downsampled frame back to full resolution.
///
/// The corner is multiplied by `factor`, the size becomes `factor * size`,
/// and the box is shifted by the smallest amount that puts it inside
/// `bounds`.
pub fn scale_box_up(b: BBox, factor: usize, bounds: Dims) -> Result<BBox> {
    let size = b.size.map(|s| s * factor);
    if (0..3).any(|a| size[a] > bounds[a]) {
        return Err(Error::Range(format!(
            "scaled box size {size:?} exceeds bounds {bounds:?}"
        )));
    }
    let min = [0, 1, 2].map(|a| {
        let hi = (bounds[a] - size[a]) as isize;
        (b.min[a] * factor as isize).clamp(0, hi)
    });
    Ok(BBox::new(min, size))
}

/// Box of `size` centred on the foreground centroid of `gt`, kept inside the
/// frame.
pub fn target_box(gt: &Mask, size: [usize; 3]) -> Result<BBox> {
    let dims = gt.dims();
    check_box_size(dims, size)?;
    let c = gt.centroid().ok_or(Error::EmptyStructure)?;
    let min = [0, 1, 2].map(|a| {
        let start = (c[a] - (size[a] as f64 - 1.0) / 2.0).round_ties_even() as isize;
        start.clamp(0, (dims[a] - size[a]) as isize)
    });
    let bbox = BBox::new(min, size);
    let outside = gt
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v && !bbox.contains(gt.coords(i).map(|c| c as isize)))
        .count();
    if outside > 0 {
        log::warn!("{outside} foreground voxels fall outside the {size:?} box at {bbox}");
    }
    Ok(bbox)
}

/// Localisation training target at `1/factor` resolution.
///
/// A low-resolution voxel is foreground iff the centre of its `factor^3`
/// block lies inside the [`target_box`].
pub fn make_loc_target(gt: &Mask, size: [usize; 3], factor: usize) -> Result<(BBox, Mask)> {
    let dims = gt.dims();
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(Error::Downsample {
            dims,
            factor: [factor; 3],
        });
    }
    let bbox = target_box(gt, size)?;
    let low = dims.map(|d| d / factor);
    let spacing = gt.spacing().map(|s| s * factor as f64);
    let half = (factor as f64 - 1.0) / 2.0;
    let inside = |a: usize, i: usize| {
        let centre = (factor * i) as f64 + half;
        let lo = bbox.min[a] as f64 - 0.5;
        centre >= lo && centre < lo + size[a] as f64
    };
    let label = Grid::from_fn(low, spacing, |x, y, z| inside(0, x) && inside(1, y) && inside(2, z))?;
    Ok((bbox, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ONE: [f64; 3] = [1.0; 3];

    fn mask_with(dims: Dims, on: &[[usize; 3]]) -> Mask {
        let mut m = Mask::filled(dims, ONE, false).unwrap();
        for p in on {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    fn direct_count(m: &Mask, b: BBox) -> u64 {
        let [x0, y0, z0] = b.min_unsigned();
        let mut n = 0;
        for z in z0..z0 + b.size[2] {
            for y in y0..y0 + b.size[1] {
                for x in x0..x0 + b.size[0] {
                    n += m.get(x, y, z) as u64;
                }
            }
        }
        n
    }

    #[test]
    fn integral_of_trivial_masks() {
        let empty = build_integral(&Mask::filled([3, 4, 5], ONE, false).unwrap());
        assert!(empty.sums.iter().all(|&s| s == 0));
        let full = build_integral(&Mask::filled([4, 4, 4], ONE, true).unwrap());
        assert_eq!(full.total(), 64);
        assert_eq!(box_count(&full, BBox::from_unsigned([1, 1, 1], [2, 2, 2])).unwrap(), 8);
    }

    #[test]
    fn unit_box_on_foreground() {
        let m = mask_with([5, 5, 5], &[[2, 3, 1]]);
        let s = build_integral(&m);
        assert_eq!(box_count(&s, BBox::from_unsigned([2, 3, 1], [1, 1, 1])).unwrap(), 1);
        assert_eq!(box_count(&s, BBox::from_unsigned([1, 3, 1], [1, 1, 1])).unwrap(), 0);
    }

    #[test]
    fn out_of_range_query_is_rejected() {
        let s = build_integral(&Mask::filled([4, 4, 4], ONE, true).unwrap());
        for b in [
            BBox::from_unsigned([3, 0, 0], [2, 1, 1]),
            BBox::new([-1, 0, 0], [1, 1, 1]),
            BBox::from_unsigned([0, 0, 0], [0, 1, 1]),
        ] {
            assert!(matches!(box_count(&s, b), Err(Error::Range(_))), "{b}");
        }
    }

    #[test]
    fn random_queries_match_direct_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Mask::from_fn([8, 8, 8], ONE, |_, _, _| rng.random_bool(0.4)).unwrap();
        let s = build_integral(&m);
        for _ in 0..100 {
            let size: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=8));
            let min: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=8 - size[a]));
            let b = BBox::from_unsigned(min, size);
            assert_eq!(box_count(&s, b).unwrap(), direct_count(&m, b));
        }
    }

    #[test]
    fn single_voxel_at_origin_has_unique_box() {
        let m = mask_with([4, 4, 4], &[[0, 0, 0]]);
        assert_eq!(locate_box(&m, [2, 2, 2]).unwrap().min, [0, 0, 0]);
    }

    #[test]
    fn eight_way_tie_rounds_down() {
        // Corners {0,1}^3 all contain (1,1,1); mean 0.5 rounds to 0.
        let m = mask_with([4, 4, 4], &[[1, 1, 1]]);
        assert_eq!(locate_box(&m, [2, 2, 2]).unwrap().min, [0, 0, 0]);
    }

    #[test]
    fn empty_volume_picks_the_middle() {
        let m = Mask::filled([4, 4, 4], ONE, false).unwrap();
        assert_eq!(locate_box(&m, [2, 2, 2]).unwrap().min, [1, 1, 1]);
    }

    #[test]
    fn oversized_box_is_a_range_error() {
        let m = Mask::filled([4, 4, 4], ONE, false).unwrap();
        assert!(matches!(locate_box(&m, [5, 2, 2]), Err(Error::Range(_))));
        assert!(matches!(locate_box_exhaustive(&m, [2, 2, 5]), Err(Error::Range(_))));
    }

    #[test]
    fn tie_rule_arithmetic() {
        let mut t = ArgmaxTies::new();
        for c in [[0, 0, 0], [1, 2, 5], [2, 4, 7]] {
            t.offer(3, c);
        }
        // means 1, 2, 4
        assert_eq!(t.corner([9, 9, 9]), [1, 2, 4]);
        let mut t = ArgmaxTies::new();
        t.offer(1, [3, 3, 3]);
        t.offer(1, [4, 6, 4]);
        // means 3.5, 4.5, 3.5 round toward the lower index
        assert_eq!(t.corner([9, 9, 9]), [3, 4, 3]);
        // a larger value resets the tie set
        t.offer(2, [7, 7, 7]);
        assert_eq!(t.corner([9, 9, 9]), [7, 7, 7]);
    }

    #[test]
    fn downsampled_box_scales_to_full_size() {
        let b = scale_box_up(BBox::from_unsigned([0, 0, 0], [36, 36, 28]), 4, [384, 384, 224]).unwrap();
        assert_eq!(b, BBox::from_unsigned([0, 0, 0], [144, 144, 112]));
    }

    #[test]
    fn scaled_box_is_pushed_back_inside() {
        let b = scale_box_up(BBox::from_unsigned([70, 70, 40], [36, 36, 28]), 4, [384, 384, 224]).unwrap();
        assert_eq!(b.min, [240, 240, 112]);
        assert!(b.fits_within([384, 384, 224]));
        assert!(matches!(
            scale_box_up(BBox::from_unsigned([0, 0, 0], [10, 10, 10]), 4, [32, 64, 64]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn centred_target_gives_a_quarter_size_block() {
        // Symmetric object centred at 191.5 in a 384 frame.
        let dims = [384, 384, 224];
        let m = Mask::from_fn(dims, ONE, |x, y, z| {
            (190..194).contains(&x) && (190..194).contains(&y) && (110..114).contains(&z)
        })
        .unwrap();
        let (bbox, label) = make_loc_target(&m, [56, 56, 80], 4).unwrap();
        assert_eq!(bbox.min, [164, 164, 72]);
        assert_eq!(label.dims(), [96, 96, 56]);
        assert_eq!(label.count(), 14 * 14 * 20);
        let s = build_integral(&label);
        assert_eq!(box_count(&s, BBox::from_unsigned([41, 41, 18], [14, 14, 20])).unwrap(), 14 * 14 * 20);
    }

    #[test]
    fn corner_target_is_clamped_flush() {
        let m = mask_with([64, 64, 64], &[[1, 0, 62], [0, 1, 63]]);
        let (bbox, label) = make_loc_target(&m, [16, 16, 24], 4).unwrap();
        assert_eq!(bbox, BBox::from_unsigned([0, 0, 40], [16, 16, 24]));
        assert_eq!(label.count(), 4 * 4 * 6);
        assert!(label.get(0, 0, 15) && !label.get(0, 0, 9));
    }

    #[test]
    fn empty_ground_truth_is_rejected() {
        let m = Mask::filled([16, 16, 16], ONE, false).unwrap();
        assert!(matches!(make_loc_target(&m, [8, 8, 8], 4), Err(Error::EmptyStructure)));
    }

    fn random_case() -> impl Strategy<Value = (Mask, [usize; 3])> {
        (1usize..=12, 1usize..=12, 1usize..=12, 0.0f64..0.6, any::<u64>()).prop_flat_map(|(nx, ny, nz, p, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Mask::from_fn([nx, ny, nz], ONE, |_, _, _| rng.random_bool(p)).unwrap();
            ((1..=nx), (1..=ny), (1..=nz)).prop_map(move |(a, b, c)| (m.clone(), [a, b, c]))
        })
    }

    proptest! {
        #[test]
        fn located_box_matches_exhaustive_search((m, size) in random_case()) {
            let fast = locate_box(&m, size).unwrap();
            prop_assert_eq!(fast, locate_box_exhaustive(&m, size).unwrap());
            prop_assert!(fast.fits_within(m.dims()));
        }

        #[test]
        fn target_box_contains_centroid_voxel((m, size) in random_case()) {
            prop_assume!(m.count() > 0);
            let b = target_box(&m, size).unwrap();
            let c = m.centroid().unwrap().map(|v| v.round_ties_even() as isize);
            prop_assert!(b.fits_within(m.dims()));
            prop_assert!(b.contains(c), "{} misses {:?}", b, c);
        }
    }
}
