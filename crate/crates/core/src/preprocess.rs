//! Isotropic resampling, group-wise margin cropping, intensity
//! normalization and block downsampling.
//!
//! Axis convention: x = left-right, y = anterior-posterior,
//! z = superior-inferior, with indices increasing toward left, posterior
//! and inferior. Margin fractions are expressed in that frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, BBox, Dims, Grid, Mask, Volume};

/// The cropped frame every case is brought to.
pub const CROP_WINDOW: Dims = [384, 384, 224];

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 1000.0;

/// Normalized value of air (-1000 HU); used when a crop window has to pad.
pub const PAD_VALUE_NORMALIZED: f32 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CropGroup {
    /// Brainstem, chiasm, optic nerves.
    One,
    /// Mandible, parotids, submandibular glands.
    Two,
}

impl CropGroup {
    pub fn number(self) -> u8 {
        match self {
            CropGroup::One => 1,
            CropGroup::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(CropGroup::One),
            2 => Some(CropGroup::Two),
            _ => None,
        }
    }
}

impl TryFrom<u8> for CropGroup {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        Self::from_number(n).ok_or_else(|| format!("crop group must be 1 or 2, got {n}"))
    }
}

impl From<CropGroup> for u8 {
    fn from(g: CropGroup) -> u8 {
        g.number()
    }
}

/// Crop window plus the (low, high) margin split per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub window: Dims,
    pub margin_fracs: [[f64; 2]; 3],
}

impl CropSpec {
    pub fn for_group(group: CropGroup) -> Self {
        let margin_fracs = match group {
            CropGroup::One => [[0.5, 0.5], [0.3, 0.7], [0.9, 0.1]],
            CropGroup::Two => [[0.5, 0.5], [0.2, 0.8], [0.7, 0.3]],
        };
        Self {
            window: CROP_WINDOW,
            margin_fracs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const AXES: [&str; 3] = ["x", "y", "z"];
        for (axis, [lo, hi]) in self.margin_fracs.iter().enumerate() {
            if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || ((lo + hi) - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("margin_fracs.{}", AXES[axis]),
                    format!("({lo}, {hi}) must be non-negative and sum to 1"),
                ));
            }
        }
        if self.window.contains(&0) {
            return Err(Error::config("window", "window dims must be >= 1"));
        }
        Ok(())
    }
}

/// Place the crop window on an image of `dims` voxels.
///
/// Along each axis the slack (image minus window) is split between the low
/// and high margins by `margin_fracs`, rounding the low margin half to even.
/// A negative slack yields a negative offset, i.e. padding.
pub fn compute_crop_box(dims: Dims, spec: &CropSpec) -> BBox {
    let mut min = [0isize; 3];
    for a in 0..3 {
        let slack = dims[a] as i64 - spec.window[a] as i64;
        let low = spec.margin_fracs[a][0];
        min[a] = if slack >= 0 {
            (low * slack as f64).round_ties_even() as isize
        } else {
            -((low * (-slack) as f64).round_ties_even() as isize)
        };
    }
    BBox::new(min, spec.window)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Separable Keys cubic (a = -0.5), clamped at the borders. For images.
    Cubic,
    /// Nearest sample. For masks.
    Nearest,
}

/// Number of voxels along an axis after resampling to `target` mm.
pub fn resampled_len(len: usize, spacing: f64, target: f64) -> usize {
    (len as f64 * spacing / target).round() as usize
}

/// Resample to `target_spacing` mm along every axis.
///
/// Output voxel `o` samples input coordinate `o * target / spacing`, so the
/// first voxel centers coincide.
pub fn resample_isotropic(v: &Volume, target_spacing: f64, kind: Interpolation) -> Result<Volume> {
    if !(target_spacing > 0.0) || !target_spacing.is_finite() {
        return Err(Error::Resample(format!("target spacing must be > 0, got {target_spacing}")));
    }
    let mut dims = v.dims();
    let spacing = v.spacing();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        let out_len = resampled_len(dims[axis], spacing[axis], target_spacing);
        if out_len == 0 {
            return Err(Error::Resample(format!(
                "axis {axis}: {} voxels at {} mm collapse to zero at {target_spacing} mm",
                dims[axis], spacing[axis]
            )));
        }
        let step = target_spacing / spacing[axis];
        if out_len == dims[axis] && (step - 1.0).abs() < 1e-12 {
            continue;
        }
        if kind == Interpolation::Cubic && dims[axis] < 2 {
            return Err(Error::Resample(format!(
                "axis {axis} has a single sample; cannot interpolate"
            )));
        }
        let (next, next_dims) = resample_axis(&data, dims, axis, out_len, step, kind);
        data = next;
        dims = next_dims;
    }
    Grid::from_vec(dims, [target_spacing; 3], data)
}

pub fn resample_mask_isotropic(m: &Mask, target_spacing: f64) -> Result<Mask> {
    let v = resample_isotropic(&m.to_volume(), target_spacing, Interpolation::Nearest)?;
    Ok(v.map(|&x| x > 0.5))
}

/// Keys cubic convolution kernel with a = -0.5.
fn keys_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per output sample: up to four (source index, weight) taps.
fn axis_taps(in_len: usize, out_len: usize, step: f64, kind: Interpolation) -> Vec<Vec<(usize, f64)>> {
    let last = (in_len - 1) as isize;
    (0..out_len)
        .map(|o| {
            let pos = o as f64 * step;
            match kind {
                Interpolation::Nearest => {
                    let i = (pos.round() as isize).clamp(0, last) as usize;
                    vec![(i, 1.0)]
                }
                Interpolation::Cubic => {
                    let base = pos.floor();
                    let frac = pos - base;
                    if frac.abs() < 1e-9 {
                        let i = (base as isize).clamp(0, last) as usize;
                        return vec![(i, 1.0)];
                    }
                    (-1..=2)
                        .map(|k| {
                            let i = (base as isize + k).clamp(0, last) as usize;
                            (i, keys_weight(frac - k as f64))
                        })
                        .collect()
                }
            }
        })
        .collect()
}

fn resample_axis(
    data: &[f32],
    dims: Dims,
    axis: usize,
    out_len: usize,
    step: f64,
    kind: Interpolation,
) -> (Vec<f32>, Dims) {
    let taps = axis_taps(dims[axis], out_len, step, kind);
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let mut out = vec![0.0f32; voxel_count(out_dims)];
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let o = [x, y, z];
                let mut acc = 0.0f64;
                for &(i, w) in &taps[o[axis]] {
                    let mut src = o;
                    src[axis] = i;
                    acc += w * data[linear_index(dims, src[0], src[1], src[2])] as f64;
                }
                out[linear_index(out_dims, x, y, z)] = acc as f32;
            }
        }
    }
    (out, out_dims)
}

/// Clip to [-1000, 1000] HU and map linearly onto [0, 1].
pub fn normalize_intensity(v: &Volume) -> Volume {
    v.map(|&hu| (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
}

fn check_divisible(dims: Dims, factor: [usize; 3]) -> Result<Dims> {
    if (0..3).any(|a| factor[a] == 0 || !dims[a].is_multiple_of(factor[a])) {
        return Err(Error::Downsample { dims, factor });
    }
    Ok([0, 1, 2].map(|a| dims[a] / factor[a]))
}

fn block_reduce<T: Copy, U>(
    grid: &Grid<T>,
    factor: [usize; 3],
    mut reduce: impl FnMut(&[T]) -> U,
) -> Result<Grid<U>> {
    let out_dims = check_divisible(grid.dims(), factor)?;
    let spacing = [0, 1, 2].map(|a| grid.spacing()[a] * factor[a] as f64);
    let mut block = Vec::with_capacity(factor.iter().product());
    Grid::from_fn(out_dims, spacing, |x, y, z| {
        block.clear();
        for dz in 0..factor[2] {
            for dy in 0..factor[1] {
                for dx in 0..factor[0] {
                    block.push(grid.get(x * factor[0] + dx, y * factor[1] + dy, z * factor[2] + dz));
                }
            }
        }
        reduce(&block)
    })
}

/// Block-mean downsampling; spacing scales with the factor.
pub fn downsample_factor(v: &Volume, factor: [usize; 3]) -> Result<Volume> {
    block_reduce(v, factor, |b| {
        (b.iter().map(|&x| x as f64).sum::<f64>() / b.len() as f64) as f32
    })
}

/// Block-majority downsampling; ties go to foreground.
pub fn downsample_mask(m: &Mask, factor: [usize; 3]) -> Result<Mask> {
    block_reduce(m, factor, |b| 2 * b.iter().filter(|&&x| x).count() >= b.len())
}

/// Repeat every voxel `factor` times per axis (nearest upsampling).
pub fn upsample_repeat<T: Copy>(grid: &Grid<T>, factor: [usize; 3]) -> Grid<T> {
    let dims = grid.dims();
    let out_dims = [0, 1, 2].map(|a| dims[a] * factor[a]);
    let spacing = [0, 1, 2].map(|a| grid.spacing()[a] / factor[a] as f64);
    Grid::from_fn(out_dims, spacing, |x, y, z| {
        grid.get(x / factor[0], y / factor[1], z / factor[2])
    })
    .expect("upsampled geometry is valid")
}
