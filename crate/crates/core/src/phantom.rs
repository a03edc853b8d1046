//! Deterministic synthetic CT cases: noisy ellipsoids on a flat background.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::{read_image, read_mask, write_mask, write_volume, ElementType};
use crate::preprocess::{HU_MAX, HU_MIN};
use crate::volume::{Dims, Mask, Spacing, StructureId, Volume};
use crate::{Error, Result};

/// One ellipsoid. Unlabelled blobs only shape the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub label: Option<StructureId>,
    /// Nominal centre in mm from the frame origin.
    pub center_mm: [f64; 3],
    /// Uniform range of each semi-axis, mm.
    pub semi_axes_mm: [[f64; 2]; 3],
    /// The centre moves by up to this much along each axis, mm.
    pub jitter_mm: f64,
    /// Mean intensity inside, HU.
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub background: f32,
    /// Gaussian noise standard deviation, HU.
    pub noise_sigma: f32,
    /// Painted in order; later blobs cover earlier ones in the image.
    pub blobs: Vec<BlobSpec>,
    pub seed: u64,
}

impl PhantomSpec {
    /// 64³ at 1 mm: a soft-tissue target labelled `target` near the centre
    /// and a brighter unlabelled distractor.
    pub fn standard(target: StructureId, seed: u64) -> Self {
        Self::with_dims(target, seed, [64, 64, 64])
    }

    /// The standard layout with blob centres placed proportionally in a
    /// 1 mm frame of `dims`; blob sizes stay fixed. Needs about 48 voxels
    /// per axis.
    pub fn with_dims(target: StructureId, seed: u64, dims: Dims) -> Self {
        let at = |f: [f64; 3]| std::array::from_fn(|a| f[a] * dims[a].saturating_sub(1) as f64);
        Self {
            dims,
            spacing: [1.0; 3],
            background: 0.0,
            noise_sigma: 25.0,
            blobs: vec![
                BlobSpec {
                    label: Some(target),
                    center_mm: at([0.5; 3]),
                    semi_axes_mm: [[6.0, 10.0], [6.0, 10.0], [5.0, 8.0]],
                    jitter_mm: 6.0,
                    intensity: 200.0,
                },
                BlobSpec {
                    label: None,
                    center_mm: at([0.2, 0.8, 0.8]),
                    semi_axes_mm: [[4.0, 6.0], [4.0, 6.0], [4.0, 6.0]],
                    jitter_mm: 3.0,
                    intensity: 500.0,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spec(format!("bad geometry {:?} at {:?}", self.dims, self.spacing)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            for a in 0..3 {
                let [lo, hi] = b.semi_axes_mm[a];
                let extent = (self.dims[a] - 1) as f64 * self.spacing[a];
                if !(lo <= hi) || lo < self.spacing[a] {
                    return Err(Error::Spec(format!(
                        "blob {i}: semi-axis range {:?} on axis {a} must be ordered and at least one voxel",
                        b.semi_axes_mm[a]
                    )));
                }
                let reach = hi + b.jitter_mm.abs();
                if b.center_mm[a] - reach < 0.0 || b.center_mm[a] + reach > extent {
                    return Err(Error::Spec(format!(
                        "blob {i}: centre {} +- {reach} mm leaves the frame [0, {extent}] on axis {a}",
                        b.center_mm[a]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Voxels whose centres satisfy `sum((p - c) / r)^2 <= 1`, all in mm.
pub fn voxelize_ellipsoid(dims: Dims, spacing: Spacing, center: [f64; 3], semi_axes: [f64; 3]) -> Result<Mask> {
    Mask::from_fn(dims, spacing, |x, y, z| {
        let p = [x, y, z];
        (0..3)
            .map(|a| ((p[a] as f64 * spacing[a] - center[a]) / semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    })
}

/// A generated case: HU image plus one mask per labelled blob.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub image: Volume,
    pub masks: BTreeMap<StructureId, Mask>,
    /// Sampled centre of each labelled blob, mm.
    pub centers: BTreeMap<StructureId, [f64; 3]>,
}

/// Generate case `case_seed` of `spec`. Identical inputs give identical
/// bits.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_seed);
    let mut image = Volume::filled(spec.dims, spec.spacing, spec.background)?;
    let mut masks = BTreeMap::new();
    let mut centers = BTreeMap::new();
    for b in &spec.blobs {
        let axes: [f64; 3] = std::array::from_fn(|a| rng.random_range(b.semi_axes_mm[a][0]..=b.semi_axes_mm[a][1]));
        let j = b.jitter_mm.abs();
        let center: [f64; 3] = std::array::from_fn(|a| b.center_mm[a] + rng.random_range(-j..=j));
        let m = voxelize_ellipsoid(spec.dims, spec.spacing, center, axes)?;
        for (v, &inside) in image.data_mut().iter_mut().zip(m.data()) {
            if inside {
                *v = b.intensity;
            }
        }
        if let Some(id) = b.label {
            masks.insert(id, m);
            centers.insert(id, center);
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma as f64).expect("sigma checked");
        for v in image.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(HU_MIN, HU_MAX);
    }
    Ok(PhantomCase { image, masks, centers })
}

/// File locations of one case directory:
///
/// ```text
/// case_007/
///   image.nrrd            float32 HU
///   masks/<structure>.nrrd  uint8 0/1
/// ```
#[derive(Clone, Debug)]
pub struct CaseLayout {
    pub dir: PathBuf,
}

impl CaseLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn name(&self) -> String {
        self.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn image(&self) -> PathBuf {
        self.dir.join("image.nrrd")
    }

    pub fn mask(&self, id: StructureId) -> PathBuf {
        self.dir.join("masks").join(format!("{}.nrrd", id.name()))
    }

    pub fn write(&self, case: &PhantomCase) -> Result<()> {
        let masks = self.dir.join("masks");
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        write_volume(&case.image, ElementType::F32, self.image())?;
        for (&id, m) in &case.masks {
            write_mask(m, self.mask(id))?;
        }
        Ok(())
    }

    pub fn read_image(&self) -> Result<Volume> {
        read_image(self.image())
    }

    pub fn read_mask(&self, id: StructureId) -> Result<Mask> {
        read_mask(self.mask(id))
    }
}

/// Case directories (`case_*`) under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<CaseLayout>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && entry.file_name().to_string_lossy().starts_with("case_") {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(CaseLayout::new).collect())
}

/// Write cases `first..first + count` as `case_NNN` directories.
pub fn write_cases(spec: &PhantomSpec, root: &Path, first: u64, count: u64) -> Result<Vec<CaseLayout>> {
    (first..first + count)
        .map(|i| {
            let layout = CaseLayout::new(root.join(format!("case_{i:03}")));
            layout.write(&generate_case(spec, i)?)?;
            Ok(layout)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{connected_components, Connectivity};

    #[test]
    fn same_seed_same_bits() {
        let spec = PhantomSpec::standard(StructureId::Brainstem, 3);
        let a = generate_case(&spec, 5).unwrap();
        let b = generate_case(&spec, 5).unwrap();
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.masks, b.masks);
        assert_ne!(generate_case(&spec, 6).unwrap().image, a.image);
    }

    #[test]
    fn ellipsoid_volume_matches_formula() {
        let m = voxelize_ellipsoid([40, 40, 40], [1.0; 3], [20.3, 19.6, 20.1], [8.0, 6.0, 4.0]).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 8.0 * 6.0 * 4.0;
        let n = m.count() as f64;
        assert!((n - exact).abs() / exact < 0.1, "{n} vs {exact}");
    }

    #[test]
    fn noiseless_images_have_two_levels() {
        let mut spec = PhantomSpec::standard(StructureId::Chiasm, 1);
        spec.noise_sigma = 0.0;
        spec.blobs.truncate(1);
        let case = generate_case(&spec, 0).unwrap();
        let m = &case.masks[&StructureId::Chiasm];
        for (&v, &inside) in case.image.data().iter().zip(m.data()) {
            assert_eq!(v, if inside { 200.0 } else { 0.0 });
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = PhantomSpec::standard(StructureId::Brainstem, 0);
        spec.blobs[0].center_mm = [5.0, 32.0, 32.0];
        assert!(matches!(generate_case(&spec, 0), Err(Error::Spec(_))));
        let mut spec = PhantomSpec::standard(StructureId::Brainstem, 0);
        spec.noise_sigma = -1.0;
        assert!(matches!(generate_case(&spec, 0), Err(Error::Spec(_))));
        let mut spec = PhantomSpec::standard(StructureId::Brainstem, 0);
        spec.blobs[0].semi_axes_mm[1] = [9.0, 7.0];
        assert!(matches!(generate_case(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn masks_are_single_components_near_their_centre() {
        let spec = PhantomSpec::standard(StructureId::Brainstem, 17);
        for seed in 0..20 {
            let case = generate_case(&spec, seed).unwrap();
            let m = &case.masks[&StructureId::Brainstem];
            assert!(m.count() > 0);
            assert_eq!(connected_components(m, Connectivity::TwentySix).sizes.len(), 1);
            let c = m.centroid().unwrap();
            let nominal = spec.blobs[0].center_mm;
            for a in 0..3 {
                assert!((c[a] - nominal[a]).abs() <= spec.blobs[0].jitter_mm + 1.0);
                assert!((c[a] - case.centers[&StructureId::Brainstem][a]).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn case_directories_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::with_dims(StructureId::Brainstem, 2, [48, 48, 48]);
        let written = write_cases(&spec, dir.path(), 0, 2).unwrap();
        let listed = list_cases(dir.path()).unwrap();
        assert_eq!(listed.len(), 2);
        assert_eq!(listed[1].name(), "case_001");
        let case = generate_case(&spec, 1).unwrap();
        assert_eq!(written[1].read_image().unwrap(), case.image);
        assert_eq!(listed[1].read_mask(StructureId::Brainstem).unwrap(), case.masks[&StructureId::Brainstem]);
    }
}
