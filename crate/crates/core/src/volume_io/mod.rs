//! Volume container, study manifests, resampling and HU windowing.

mod ctvol;
mod manifest;
mod resample;

pub use ctvol::{parse_ctvol, parse_ctvol_counting, read_ctvol, write_ctvol, write_ctvol_file};
pub use manifest::{load_manifest, write_manifest, Label, ManifestRow, StudyManifest};
pub use resample::{axis_nearest, resample_volume};

use thiserror::Error;

/// Lowest representable HU value.
pub const HU_MIN: i16 = -1024;
/// Highest representable HU value.
pub const HU_MAX: i16 = 3071;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not a CTVOL1 file")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("bad HU window: lo {lo} must be below hi {hi}")]
    BadWindow { lo: f32, hi: f32 },
    #[error("resampling would produce an empty volume")]
    EmptyOutput,
    #[error("duplicate timepoint {timepoint} for study {study_id}")]
    DuplicateTimepoint { study_id: String, timepoint: u32 },
    #[error("day offsets decrease within study {0}")]
    UnorderedDays(String),
    #[error("unresolvable path {0}")]
    UnresolvablePath(String),
    #[error("bad label {0:?} (expected positive, negative or unknown)")]
    BadLabel(String),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Ordered free-form key/value pairs carried alongside a volume.
///
/// Keys may not contain `=`, `;` or newlines; values may not contain `;` or
/// newlines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata(Vec<(String, String)>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Sets `key`, replacing an existing entry in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.0.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.0.push((key, value)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in &self.0 {
            if k.is_empty() || k.contains(['=', ';', '\n']) || v.contains([';', '\n']) {
                return Err(VolumeError::InvalidVolume(format!("bad metadata entry {k:?}={v:?}")));
            }
        }
        Ok(())
    }
}

/// A 3D grid of HU values with physical voxel spacing in mm.
///
/// Voxels are stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<i16>,
    pub meta: Metadata,
}

impl CtVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        let vol = Self { dims, spacing, voxels, meta: Metadata::new() };
        vol.validate()?;
        Ok(vol)
    }

    /// A volume with every voxel set to `hu`.
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], hu: i16) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![hu; n])
    }

    pub fn with_meta(mut self, meta: Metadata) -> Self {
        self.meta = meta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidVolume(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::InvalidVolume(format!("bad spacing {:?}", self.spacing)));
        }
        let expected: usize = self.dims.iter().product();
        if self.voxels.len() != expected {
            return Err(VolumeError::InvalidVolume(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        if let Some(hu) = self.voxels.iter().find(|&&hu| !(HU_MIN..=HU_MAX).contains(&hu)) {
            return Err(VolumeError::InvalidVolume(format!("HU {hu} out of range")));
        }
        self.meta.validate()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [i16] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// The HU values of axial slice `z`, x-fastest.
    pub fn slice(&self, z: usize) -> &[i16] {
        let plane = self.dims[0] * self.dims[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

/// An HU display/normalization window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HuWindow {
    pub lo: f32,
    pub hi: f32,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { lo: -1000.0, hi: 400.0 }
    }
}

impl HuWindow {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(VolumeError::BadWindow { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        ((hu - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Maps every voxel of `v` to `[0, 1]` through `window`.
pub fn hu_normalize(v: &CtVolume, window: (f32, f32)) -> Result<Vec<f32>> {
    let window = HuWindow::new(window.0, window.1)?;
    Ok(v.voxels.iter().map(|&hu| window.apply(hu as f32)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_endpoints_and_midpoint() {
        let v = CtVolume::new([4, 1, 1], [1.0; 3], vec![-1000, 400, -300, 3000]).unwrap();
        let n = hu_normalize(&v, (-1000.0, 400.0)).unwrap();
        assert_eq!(n, vec![0.0, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn window_rejects_inverted_bounds() {
        let v = CtVolume::filled([1, 1, 1], [1.0; 3], 0).unwrap();
        assert!(matches!(hu_normalize(&v, (400.0, 400.0)), Err(VolumeError::BadWindow { .. })));
        assert!(matches!(hu_normalize(&v, (500.0, -100.0)), Err(VolumeError::BadWindow { .. })));
    }

    #[test]
    fn volume_invariants_are_enforced() {
        assert!(CtVolume::new([2, 2, 1], [1.0, 0.0, 1.0], vec![0; 4]).is_err());
        assert!(CtVolume::new([2, 2, 1], [1.0, 1.0, 1.0], vec![0; 3]).is_err());
        assert!(CtVolume::new([2, 0, 1], [1.0, 1.0, 1.0], vec![]).is_err());
        assert!(CtVolume::new([1, 1, 1], [1.0, 1.0, f64::NAN], vec![0]).is_err());
        assert!(CtVolume::new([1, 1, 1], [1.0; 3], vec![-2000]).is_err());
    }

    #[test]
    fn metadata_set_replaces_in_place() {
        let mut m = Metadata::new();
        m.set("study", "a");
        m.set("day", "0");
        m.set("study", "b");
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![("study", "b"), ("day", "0")]);
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_monotone(a in -1024i16..=3071, b in -1024i16..=3071) {
            let w = HuWindow::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(w.apply(lo as f32) <= w.apply(hi as f32));
        }
    }
}
