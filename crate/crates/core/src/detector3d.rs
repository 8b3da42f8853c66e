//! Rule-based focal opacity detection: an HU band inside the lung mask,
//! 3D components, a volume window, and per-lesion measurements.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{label_components, Mask};
use crate::volume_io::CtVolume;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("lesion has no voxels")]
    EmptyLesion,
    #[error("mask dims {0:?} do not match volume dims {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    #[serde(rename = "GGO")]
    GroundGlass,
    #[serde(rename = "sub-solid")]
    SubSolid,
    #[serde(rename = "solid")]
    Solid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Open HU interval of candidate voxels.
    pub hu_band: (f64, f64),
    pub min_volume_cm3: f64,
    pub max_volume_cm3: f64,
    /// Only face connectivity (6) is supported.
    pub connectivity: u8,
    /// Mean HU at which texture becomes sub-solid.
    pub subsolid_from_hu: f64,
    /// Mean HU at which texture becomes solid.
    pub solid_from_hu: f64,
    /// Any voxel above this HU marks the lesion calcified.
    pub calcium_hu: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hu_band: (-700.0, -250.0),
            min_volume_cm3: 0.1,
            max_volume_cm3: 50.0,
            connectivity: 6,
            subsolid_from_hu: -300.0,
            solid_from_hu: -50.0,
            calcium_hu: 130.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_band;
        if !(lo < hi) || !(0.0 < self.min_volume_cm3 && self.min_volume_cm3 < self.max_volume_cm3) {
            return Err(DetectorError::InvalidConfig(format!("{self:?}")));
        }
        if self.connectivity != 6 {
            return Err(DetectorError::InvalidConfig(format!("connectivity {} (only 6)", self.connectivity)));
        }
        if !(self.subsolid_from_hu < self.solid_from_hu) {
            return Err(DetectorError::InvalidConfig("texture thresholds out of order".into()));
        }
        Ok(())
    }

    pub fn texture(&self, mean_hu: f64) -> Texture {
        if mean_hu >= self.solid_from_hu {
            Texture::Solid
        } else if mean_hu >= self.subsolid_from_hu {
            Texture::SubSolid
        } else {
            Texture::GroundGlass
        }
    }
}

/// A run of `len` voxels along x starting at (x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub voxel_count: usize,
    pub volume_cm3: f64,
    pub avg_axial_diameter_mm: f64,
    pub mean_hu: f64,
    pub texture: Texture,
    pub calcified: bool,
    /// Voxel-center convention: voxel i spans [i·s, (i+1)·s).
    pub centroid_mm: [f64; 3],
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: usize,
    pub runs: Vec<Run>,
    #[serde(flatten)]
    pub measurements: Measurements,
}

impl Lesion {
    /// Linear voxel indices for a volume of `dims`.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<usize> {
        self.runs
            .iter()
            .flat_map(|r| {
                let start = (r.z * dims[1] + r.y) * dims[0] + r.x;
                start..start + r.len
            })
            .collect()
    }

    pub fn to_mask(&self, dims: [usize; 3]) -> Mask {
        let mut m = Mask::empty(dims);
        for i in self.voxels(dims) {
            m.data_mut()[i] = true;
        }
        m
    }
}

fn run_length(sorted: &[usize], dims: [usize; 3]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &i in sorted {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        match runs.last_mut() {
            Some(r) if r.z == z && r.y == y && r.x + r.len == x => r.len += 1,
            _ => runs.push(Run { x, y, z, len: 1 }),
        }
    }
    runs
}

/// Largest distance between boundary pixel centers of one slice, in mm.
fn feret_max(pixels: &[(usize, usize)], spacing: [f64; 3]) -> f64 {
    let set: std::collections::HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let boundary: Vec<(usize, usize)> = pixels
        .iter()
        .copied()
        .filter(|&(x, y)| {
            x == 0
                || y == 0
                || !set.contains(&(x - 1, y))
                || !set.contains(&(x + 1, y))
                || !set.contains(&(x, y - 1))
                || !set.contains(&(x, y + 1))
        })
        .collect();
    let mut best = 0.0f64;
    for (i, &(ax, ay)) in boundary.iter().enumerate() {
        for &(bx, by) in &boundary[i + 1..] {
            let dx = (ax as f64 - bx as f64) * spacing[0];
            let dy = (ay as f64 - by as f64) * spacing[1];
            best = best.max(dx * dx + dy * dy);
        }
    }
    best.sqrt()
}

/// Volume, per-slice Feret diameter average, HU statistics, texture and
/// calcification of a voxel set (linear indices into `v`).
pub fn measure_lesion(voxels: &[usize], v: &CtVolume, cfg: &DetectorConfig) -> Result<Measurements> {
    if voxels.is_empty() {
        return Err(DetectorError::EmptyLesion);
    }
    let dims = v.dims();
    let sp = v.spacing();
    let mut sorted = voxels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut sum_hu = 0.0;
    let mut calcified = false;
    let mut centroid = [0.0; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut per_slice: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for &i in &sorted {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        let hu = v.voxels()[i] as f64;
        sum_hu += hu;
        calcified |= hu > cfg.calcium_hu;
        for a in 0..3 {
            centroid[a] += (c[a] as f64 + 0.5) * sp[a];
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
        per_slice.entry(c[2]).or_default().push((c[0], c[1]));
    }
    let n = sorted.len() as f64;
    let diameters: Vec<f64> = per_slice.values().map(|px| feret_max(px, sp)).collect();
    let mean_hu = sum_hu / n;
    Ok(Measurements {
        voxel_count: sorted.len(),
        volume_cm3: n * v.voxel_volume_mm3() / 1000.0,
        avg_axial_diameter_mm: diameters.iter().sum::<f64>() / diameters.len() as f64,
        mean_hu,
        texture: cfg.texture(mean_hu),
        calcified,
        centroid_mm: centroid.map(|c| c / n),
        bbox_min: lo,
        bbox_max: hi,
    })
}

/// Focal opacities: in-mask voxels inside the HU band, grouped into
/// components within the volume window, largest first.
pub fn detect_focal_opacities(v: &CtVolume, lung: &Mask, cfg: &DetectorConfig) -> Result<Vec<Lesion>> {
    cfg.validate()?;
    if lung.dims() != v.dims() {
        return Err(DetectorError::DimMismatch(lung.dims(), v.dims()));
    }
    let (lo, hi) = cfg.hu_band;
    let candidates: Vec<bool> = v
        .voxels()
        .iter()
        .zip(lung.data())
        .map(|(&hu, &m)| m && (hu as f64) > lo && (hu as f64) < hi)
        .collect();
    let labels = label_components(&Mask::from_vec(v.dims(), candidates));
    let voxel_cm3 = v.voxel_volume_mm3() / 1000.0;
    let keep: Vec<bool> = labels
        .sizes
        .iter()
        .map(|&s| {
            let vol = s as f64 * voxel_cm3;
            vol >= cfg.min_volume_cm3 && vol <= cfg.max_volume_cm3
        })
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); labels.sizes.len()];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 0 && keep[l as usize - 1] {
            members[l as usize - 1].push(i);
        }
    }
    let mut lesions = Vec::new();
    for voxels in members.into_iter().filter(|m| !m.is_empty()) {
        let measurements = measure_lesion(&voxels, v, cfg)?;
        lesions.push(Lesion { id: 0, runs: run_length(&voxels, v.dims()), measurements });
    }
    // components are numbered in raster order, so the sort is deterministic
    lesions.sort_by(|a, b| b.measurements.voxel_count.cmp(&a.measurements.voxel_count));
    for (k, l) in lesions.iter_mut().enumerate() {
        l.id = k + 1;
    }
    Ok(lesions)
}

/// Greedy nearest-centroid matching within `gate_mm`. Returns one entry per
/// `prev` lesion, in `prev` order.
pub fn match_lesions(prev: &[Lesion], next: &[Lesion], gate_mm: f64) -> Vec<(usize, Option<usize>)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in next.iter().enumerate() {
            let d = (0..3)
                .map(|k| (a.measurements.centroid_mm[k] - b.measurements.centroid_mm[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= gate_mm {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut prev_match = vec![None; prev.len()];
    let mut next_used = vec![false; next.len()];
    for (_, i, j) in pairs {
        if prev_match[i].is_none() && !next_used[j] {
            prev_match[i] = Some(j);
            next_used[j] = true;
        }
    }
    prev.iter().zip(prev_match).map(|(a, m)| (a.id, m.map(|j| next[j].id))).collect()
}
