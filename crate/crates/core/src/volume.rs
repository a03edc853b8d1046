//! 3D grids, boxes, overlap counting and connected-component labeling.
//!
//! All grids are linearized with x fastest and z slowest:
//! `index = (z * ny + y) * nx + x`. Every module goes through
//! [`linear_index`] / [`Grid::index`] so the order lives in one place.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A dense 3D grid with physical voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

/// CT image, probability map or any other scalar field.
pub type Volume = Grid<f32>;
/// Binary foreground/background mask.
pub type Mask = Grid<bool>;

impl<T> Grid<T> {
    pub fn from_vec(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: Spacing) -> Result<()> {
        check_geometry(self.dims, spacing)?;
        self.spacing = spacing;
        Ok(())
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid<T> {
    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Ok(Self {
            dims,
            spacing,
            data: vec![value; voxel_count(dims)],
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Value at a signed index, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> Option<T> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.get(x, y, z))
    }
}

impl Mask {
    pub fn count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    pub fn to_volume(&self) -> Volume {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }

    /// Foreground centroid in voxel index units.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0u64;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

impl Volume {
    pub fn threshold(&self, level: f32) -> Mask {
        self.map(|&v| v > level)
    }
}

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Shape(format!("spacing must be > 0, got {spacing:?}")));
    }
    Ok(())
}

/// Axis-aligned box in voxel index space.
///
/// `min` is signed so crop windows may hang over the edge of an image
/// (the outside is padded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub min: [isize; 3],
    pub size: [usize; 3],
}

impl BBox {
    pub fn new(min: [isize; 3], size: [usize; 3]) -> Self {
        Self { min, size }
    }

    pub fn from_unsigned(min: [usize; 3], size: [usize; 3]) -> Self {
        Self {
            min: min.map(|m| m as isize),
            size,
        }
    }

    /// Exclusive upper corner.
    pub fn max(&self) -> [isize; 3] {
        [0, 1, 2].map(|a| self.min[a] + self.size[a] as isize)
    }

    pub fn fits_within(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.min[a] >= 0 && self.max()[a] <= dims[a] as isize)
    }

    pub fn contains(&self, p: [isize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max()[a])
    }

    pub fn volume(&self) -> u64 {
        self.size.iter().map(|&s| s as u64).product()
    }

    /// Non-negative min corner; panics if the box hangs off the origin.
    pub fn min_unsigned(&self) -> [usize; 3] {
        self.min.map(|m| usize::try_from(m).expect("box min is negative"))
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min=({},{},{}) size=({},{},{})",
            self.min[0], self.min[1], self.min[2], self.size[0], self.size[1], self.size[2]
        )
    }
}

/// The nine head-and-neck organs at risk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureId {
    Mandible,
    ParotidL,
    ParotidR,
    Brainstem,
    SubmandL,
    SubmandR,
    OpticNerveL,
    OpticNerveR,
    Chiasm,
}

impl StructureId {
    pub const ALL: [StructureId; 9] = [
        StructureId::Mandible,
        StructureId::ParotidL,
        StructureId::ParotidR,
        StructureId::Brainstem,
        StructureId::SubmandL,
        StructureId::SubmandR,
        StructureId::OpticNerveL,
        StructureId::OpticNerveR,
        StructureId::Chiasm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StructureId::Mandible => "mandible",
            StructureId::ParotidL => "parotid_l",
            StructureId::ParotidR => "parotid_r",
            StructureId::Brainstem => "brainstem",
            StructureId::SubmandL => "submand_l",
            StructureId::SubmandR => "submand_r",
            StructureId::OpticNerveL => "optic_nerve_l",
            StructureId::OpticNerveR => "optic_nerve_r",
            StructureId::Chiasm => "chiasm",
        }
    }
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::config("structure", format!("unknown structure `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub a: u64,
    pub b: u64,
}

pub fn overlap_counts(a: &Mask, b: &Mask) -> Result<OverlapCounts> {
    if a.dims() != b.dims() {
        return Err(Error::Dims {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let mut counts = OverlapCounts {
        intersection: 0,
        a: 0,
        b: 0,
    };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        counts.a += x as u64;
        counts.b += y as u64;
        counts.intersection += (x && y) as u64;
    }
    Ok(counts)
}

/// Extract `bbox` from `grid`; voxels outside the source are `fill`.
pub fn crop_or_pad<T: Copy>(grid: &Grid<T>, bbox: BBox, fill: T) -> Grid<T> {
    assert!(bbox.size.iter().all(|&s| s >= 1), "box size must be >= 1");
    let dims = grid.dims();
    let mut data = vec![fill; voxel_count(bbox.size)];
    let [ox, oy, oz] = bbox.min;
    // Intersection of the box with the source along x, in output coordinates.
    let x_lo = (-ox).max(0) as usize;
    let x_hi = ((dims[0] as isize - ox).min(bbox.size[0] as isize)).max(0) as usize;
    if x_lo < x_hi {
        for z in 0..bbox.size[2] {
            let sz = z as isize + oz;
            if sz < 0 || sz >= dims[2] as isize {
                continue;
            }
            for y in 0..bbox.size[1] {
                let sy = y as isize + oy;
                if sy < 0 || sy >= dims[1] as isize {
                    continue;
                }
                let src = grid.index((x_lo as isize + ox) as usize, sy as usize, sz as usize);
                let dst = linear_index(bbox.size, x_lo, y, z);
                data[dst..dst + (x_hi - x_lo)].copy_from_slice(&grid.data()[src..src + (x_hi - x_lo)]);
            }
        }
    }
    Grid {
        dims: bbox.size,
        spacing: grid.spacing(),
        data,
    }
}

/// Write `src` into `dst` with its origin at `min`; parts falling outside
/// `dst` are dropped.
pub fn paste<T: Copy>(dst: &mut Grid<T>, src: &Grid<T>, min: [isize; 3]) {
    let sd = src.dims();
    let dd = dst.dims();
    for z in 0..sd[2] {
        let tz = z as isize + min[2];
        if tz < 0 || tz >= dd[2] as isize {
            continue;
        }
        for y in 0..sd[1] {
            let ty = y as isize + min[1];
            if ty < 0 || ty >= dd[1] as isize {
                continue;
            }
            for x in 0..sd[0] {
                let tx = x as isize + min[0];
                if tx < 0 || tx >= dd[0] as isize {
                    continue;
                }
                dst.set(tx as usize, ty as usize, tz as usize, src.get(x, y, z));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Labeled foreground regions. Label 0 is background; regions are numbered
/// from 1 in scan order of their first voxel.
#[derive(Clone, Debug)]
pub struct Components {
    pub labels: Grid<u32>,
    /// `sizes[k]` is the voxel count of label `k + 1`.
    pub sizes: Vec<u64>,
}

impl Components {
    pub fn regions(&self) -> Vec<(u32, u64)> {
        self.sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (i as u32 + 1, n))
            .collect()
    }
}

pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Components {
    let dims = mask.dims();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let offsets = connectivity.offsets();
    let mut stack = Vec::new();

    for seed in 0..mask.len() {
        if !mask.data()[seed] || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[seed] = label;
        stack.push(seed);
        let mut count = 0u64;
        while let Some(i) = stack.pop() {
            count += 1;
            let [x, y, z] = mask.coords(i);
            for off in &offsets {
                let nx = x as isize + off[0];
                let ny = y as isize + off[1];
                let nz = z as isize + off[2];
                if nx < 0
                    || ny < 0
                    || nz < 0
                    || nx >= dims[0] as isize
                    || ny >= dims[1] as isize
                    || nz >= dims[2] as isize
                {
                    continue;
                }
                let j = linear_index(dims, nx as usize, ny as usize, nz as usize);
                if mask.data()[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(count);
    }

    Components {
        labels: Grid {
            dims,
            spacing: mask.spacing(),
            data: labels,
        },
        sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ISO: Spacing = [1.0, 1.0, 1.0];

    fn cube_mask(dims: Dims, min: [usize; 3], size: [usize; 3]) -> Mask {
        Mask::from_fn(dims, ISO, |x, y, z| {
            (min[0]..min[0] + size[0]).contains(&x)
                && (min[1]..min[1] + size[1]).contains(&y)
                && (min[2]..min[2] + size[2]).contains(&z)
        })
        .unwrap()
    }

    #[test]
    fn linearization_is_x_fastest() {
        let v = Volume::from_fn([3, 4, 5], ISO, |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[3], 10.0);
        assert_eq!(v.data()[12], 100.0);
        assert_eq!(v.coords(v.index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn geometry_is_validated() {
        assert!(Volume::filled([0, 1, 1], ISO, 0.0).is_err());
        assert!(Volume::filled([1, 1, 1], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Volume::from_vec([2, 2, 2], ISO, vec![0.0; 7]).is_err());
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let a = cube_mask([8, 8, 8], [0, 0, 0], [2, 5, 1]);
        let c = overlap_counts(&a, &a).unwrap();
        assert_eq!((c.intersection, c.a, c.b), (10, 10, 10));

        let a = cube_mask([8, 8, 8], [0, 0, 0], [5, 1, 1]);
        let b = cube_mask([8, 8, 8], [0, 4, 4], [7, 1, 1]);
        let c = overlap_counts(&a, &b).unwrap();
        assert_eq!((c.intersection, c.a, c.b), (0, 5, 7));
    }

    #[test]
    fn overlap_offset_cubes() {
        let a = cube_mask([6, 6, 6], [1, 1, 1], [2, 2, 2]);
        let b = cube_mask([6, 6, 6], [2, 1, 1], [2, 2, 2]);
        let c = overlap_counts(&a, &b).unwrap();
        assert_eq!((c.intersection, c.a, c.b), (4, 8, 8));
    }

    #[test]
    fn overlap_dims_mismatch() {
        let a = Mask::filled([2, 2, 2], ISO, false).unwrap();
        let b = Mask::filled([2, 2, 3], ISO, false).unwrap();
        assert!(matches!(overlap_counts(&a, &b), Err(Error::Dims { .. })));
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let v = Volume::from_fn([4, 5, 6], [0.5, 1.0, 2.0], |x, y, z| (x * 31 + y * 7 + z) as f32).unwrap();
        let out = crop_or_pad(&v, BBox::new([0, 0, 0], [4, 5, 6]), -1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn crop_outside_is_fill() {
        let v = Volume::filled([4, 4, 4], ISO, 1.0).unwrap();
        let out = crop_or_pad(&v, BBox::new([10, -20, 0], [3, 3, 3]), 7.0);
        assert!(out.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn crop_partial_overlap() {
        let v = Volume::filled([4, 4, 4], ISO, 1.0).unwrap();
        let out = crop_or_pad(&v, BBox::new([2, 2, 2], [4, 4, 4]), 0.0);
        assert_eq!(out.dims(), [4, 4, 4]);
        assert_eq!(out.data().iter().filter(|&&x| x == 1.0).count(), 8);
    }

    #[test]
    fn components_fixtures() {
        let empty = Mask::filled([4, 4, 4], ISO, false).unwrap();
        assert!(connected_components(&empty, Connectivity::TwentySix).regions().is_empty());

        let cube = cube_mask([6, 6, 6], [1, 1, 1], [3, 3, 3]);
        assert_eq!(connected_components(&cube, Connectivity::Six).regions(), vec![(1, 27)]);

        let mut corner = Mask::filled([3, 3, 3], ISO, false).unwrap();
        corner.set(0, 0, 0, true);
        corner.set(1, 1, 1, true);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).sizes, vec![2]);
        assert_eq!(connected_components(&corner, Connectivity::Six).sizes, vec![1, 1]);
    }

    #[test]
    fn structure_names_roundtrip() {
        for id in StructureId::ALL {
            assert_eq!(id.name().parse::<StructureId>().unwrap(), id);
        }
        assert!("spleen".parse::<StructureId>().is_err());
    }

    fn random_mask(max: usize) -> impl Strategy<Value = Mask> {
        (1..=max, 1..=max, 1..=max).prop_flat_map(|(x, y, z)| {
            proptest::collection::vec(any::<bool>(), x * y * z)
                .prop_map(move |d| Mask::from_vec([x, y, z], ISO, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn component_sizes_sum_to_foreground(m in random_mask(16), six in any::<bool>()) {
            let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
            let comps = connected_components(&m, conn);
            prop_assert_eq!(comps.sizes.iter().sum::<u64>(), m.count());
            for (i, &fg) in m.data().iter().enumerate() {
                prop_assert_eq!(fg, comps.labels.data()[i] != 0);
            }
        }
    }

    proptest! {
        #[test]
        fn overlap_symmetric(a in random_mask(6), seed in any::<u64>()) {
            let b = a.map(|&v| v ^ (seed & 1 == 1));
            let ab = overlap_counts(&a, &b).unwrap();
            let ba = overlap_counts(&b, &a).unwrap();
            prop_assert_eq!((ab.intersection, ab.a, ab.b), (ba.intersection, ba.b, ba.a));
            prop_assert!(ab.intersection <= ab.a.min(ab.b));
        }

        #[test]
        fn crop_then_inverse_restores(
            dims in (1usize..8, 1usize..8, 1usize..8),
            min in (-4isize..8, -4isize..8, -4isize..8),
            size in (1usize..8, 1usize..8, 1usize..8),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let v = Volume::from_fn(dims, ISO, |x, y, z| (x + 13 * y + 171 * z) as f32).unwrap();
            let bbox = BBox::new([min.0, min.1, min.2], [size.0, size.1, size.2]);
            let cropped = crop_or_pad(&v, bbox, -1.0);
            let back = crop_or_pad(&cropped, BBox::new(bbox.min.map(|m| -m), dims), -1.0);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        if bbox.contains([x as isize, y as isize, z as isize]) {
                            prop_assert_eq!(back.get(x, y, z), v.get(x, y, z));
                        }
                    }
                }
            }
        }
    }
}
