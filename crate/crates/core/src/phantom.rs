//! Seeded synthetic thoracic CT phantoms with analytic ground truth.
//!
//! Anatomy is built from ellipsoids whose size scales with the field of view:
//! a soft-tissue body (+40 HU), two lungs (-800 HU) and a vertebral rod
//! (+700 HU) in air (-1000 HU). Focal opacities are spheres at a fixed HU;
//! diffuse opacity is the top `diffuse_fraction` of a smoothed Gaussian random
//! field restricted to the lungs, raised by `diffuse_hu_delta`.
//!
//! All randomness comes from ChaCha8 (a 64-bit counter-based generator) with
//! one stream per purpose, so anatomy and lesion layout are shared across the
//! time points of a timeline while scanner noise is drawn per time point.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Mask;
use crate::volume_io::{
    read_ctvol, write_ctvol_file, write_manifest, CtVolume, Label, ManifestRow, Metadata,
    StudyManifest, VolumeError, HU_MAX, HU_MIN,
};

pub const AIR_HU: f64 = -1000.0;
pub const BODY_HU: f64 = 40.0;
pub const LUNG_HU: f64 = -800.0;
pub const BONE_HU: f64 = 700.0;

/// Smoothing scale of the diffuse-opacity random field, mm.
const DIFFUSE_SIGMA_MM: f64 = 10.0;
/// Minimum surface gap between focal lesions, mm.
const FOCAL_GAP_MM: f64 = 10.0;
const PLACEMENT_RETRIES: usize = 2000;

const STREAM_ANATOMY: u64 = 1;
const STREAM_LESIONS: u64 = 2;
const STREAM_FIELD: u64 = 3;
const STREAM_NOISE: u64 = 16;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
}

impl From<VolumeError> for PhantomError {
    fn from(e: VolumeError) -> Self {
        PhantomError::IoFailure(e.to_string())
    }
}

impl From<std::io::Error> for PhantomError {
    fn from(e: std::io::Error) -> Self {
        PhantomError::IoFailure(e.to_string())
    }
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_sigma: f64,
    pub n_focal: usize,
    /// Inclusive radius range, mm.
    pub focal_radius_range: (f64, f64),
    pub focal_hu: f64,
    pub diffuse_fraction: f64,
    pub diffuse_hu_delta: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [128, 128, 48],
            spacing: [2.5, 2.5, 5.0],
            noise_sigma: 20.0,
            n_focal: 0,
            focal_radius_range: (5.0, 15.0),
            focal_hu: -400.0,
            diffuse_fraction: 0.0,
            diffuse_hu_delta: 300.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.iter().any(|&d| d < 8) {
            return bad(format!("dims {:?} too small", self.dims));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad(format!("spacing {:?}", self.spacing));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.diffuse_fraction) {
            return bad(format!("diffuse_fraction {}", self.diffuse_fraction));
        }
        let (rlo, rhi) = self.focal_radius_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return bad(format!("focal_radius_range {:?}", self.focal_radius_range));
        }
        let hu_range = HU_MIN as f64..=HU_MAX as f64;
        if !hu_range.contains(&self.focal_hu) || !hu_range.contains(&(LUNG_HU + self.diffuse_hu_delta)) {
            return bad("HU parameters outside the representable range".into());
        }
        Ok(())
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLesion {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    /// Analytic sphere volume, (4/3)πr³, in cm³.
    pub volume_cm3: f64,
}

impl FocalLesion {
    fn new(center_mm: [f64; 3], radius_mm: f64) -> Self {
        let volume_cm3 = 4.0 / 3.0 * std::f64::consts::PI * radius_mm.powi(3) / 1000.0;
        Self { center_mm, radius_mm, volume_cm3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub lung_mask: Mask,
    pub opacity_mask: Mask,
    pub focal_lesions: Vec<FocalLesion>,
    pub per_slice_abnormal: Vec<bool>,
}

impl GroundTruth {
    /// Area of ground-truth opacity on each slice, mm².
    pub fn opacity_area_mm2(&self, spacing: [f64; 3]) -> Vec<f64> {
        let nz = self.opacity_mask.dims()[2];
        (0..nz)
            .map(|z| self.opacity_mask.slice_count(z) as f64 * spacing[0] * spacing[1])
            .collect()
    }

    /// Ground-truth opacity volume, cm³.
    pub fn opacity_volume_cm3(&self, spacing: [f64; 3]) -> f64 {
        self.opacity_mask.count() as f64 * spacing.iter().product::<f64>() / 1000.0
    }
}

/// Serialized form of [`GroundTruth`] minus the masks (which live in
/// `.gt.ctvol` sidecars).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSidecar {
    pub spec: PhantomSpec,
    pub burden_multiplier: f64,
    pub focal_lesions: Vec<FocalLesion>,
    pub per_slice_abnormal: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn norm2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum()
    }
}

/// Seed-determined geometry shared by all time points of one phantom.
struct Layout {
    body: Ellipsoid,
    lungs: [Ellipsoid; 2],
    spine_center: [f64; 2],
    spine_radius: f64,
    focal: Vec<FocalLesion>,
    /// Smoothed random field value per voxel.
    field: Vec<f32>,
}

fn voxel_center(i: usize, s: f64) -> f64 {
    (i as f64 + 0.5) * s
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn layout(spec: &PhantomSpec, max_multiplier: f64) -> Result<Layout> {
    let [lx, ly, lz] = spec.extent();
    let mid = [lx / 2.0, ly / 2.0, lz / 2.0];

    let mut rng = stream(spec.seed, STREAM_ANATOMY);
    let mut jitter = |scale: f64| 1.0 + scale * (rng.random::<f64>() * 2.0 - 1.0);
    let body = Ellipsoid {
        center: mid,
        semi: [0.44 * lx * jitter(0.02), 0.34 * ly * jitter(0.02), 0.75 * lz],
    };
    let lung_semi = |j: &mut dyn FnMut(f64) -> f64| [0.13 * lx * j(0.05), 0.21 * ly * j(0.05), 0.36 * lz * j(0.05)];
    let right = Ellipsoid {
        center: [mid[0] - 0.17 * lx, mid[1] - 0.02 * ly, mid[2]],
        semi: lung_semi(&mut jitter),
    };
    let left = Ellipsoid {
        center: [mid[0] + 0.17 * lx, mid[1] - 0.02 * ly, mid[2]],
        semi: lung_semi(&mut jitter),
    };
    let lungs = [right, left];

    let mut rng = stream(spec.seed, STREAM_LESIONS);
    let scale = max_multiplier.max(1.0).cbrt();
    let min_voxel = spec.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut focal: Vec<FocalLesion> = Vec::with_capacity(spec.n_focal);
    for _ in 0..spec.n_focal {
        let (rlo, rhi) = spec.focal_radius_range;
        let radius = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
        let fit_radius = radius * scale + min_voxel;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let lung = lungs[rng.random_range(0..2usize)];
            let shrunk = lung.semi.map(|s| s - fit_radius);
            let u = [0; 3].map(|_| rng.random::<f64>() * 2.0 - 1.0);
            if shrunk.iter().any(|&s| s <= 0.0) || u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                continue;
            }
            let center = [0, 1, 2].map(|a| lung.center[a] + u[a] * shrunk[a]);
            let clear = focal.iter().all(|o| {
                let d2: f64 = (0..3).map(|a| (o.center_mm[a] - center[a]).powi(2)).sum();
                d2.sqrt() >= (o.radius_mm + radius) * scale + FOCAL_GAP_MM
            });
            if clear {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            PhantomError::SpecInfeasible(format!(
                "could not place focal lesion {} of radius {radius:.1} mm",
                focal.len() + 1
            ))
        })?;
        focal.push(FocalLesion::new(center, radius));
    }

    let field = if spec.diffuse_fraction > 0.0 {
        smooth_random_field(spec)
    } else {
        Vec::new()
    };

    Ok(Layout {
        body,
        lungs,
        spine_center: [mid[0], mid[1] + 0.27 * ly],
        spine_radius: 0.045 * lx,
        focal,
        field,
    })
}

fn smooth_random_field(spec: &PhantomSpec) -> Vec<f32> {
    let mut rng = stream(spec.seed, STREAM_FIELD);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let n: usize = spec.dims.iter().product();
    let mut field: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    for axis in 0..3 {
        gaussian_blur_axis(&mut field, spec.dims, axis, DIFFUSE_SIGMA_MM / spec.spacing[axis]);
    }
    field
}

fn gaussian_blur_axis(data: &mut [f32], dims: [usize; 3], axis: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis] as isize;
    let mut line = vec![0.0f32; dims[axis]];
    let n = data.len();
    for start in 0..n {
        // visit each line once, from its first element
        if (start / stride) % dims[axis] != 0 {
            continue;
        }
        for (k, slot) in line.iter_mut().enumerate() {
            *slot = data[start + k * stride];
        }
        for k in 0..len {
            let mut acc = 0.0f32;
            for (t, w) in kernel.iter().enumerate() {
                // reflect at the edges
                let mut j = k + t as isize - radius;
                if j < 0 {
                    j = -j - 1;
                }
                if j >= len {
                    j = 2 * len - j - 1;
                }
                acc += w * line[j.clamp(0, len - 1) as usize];
            }
            data[start + k as usize * stride] = acc;
        }
    }
}

fn render(spec: &PhantomSpec, layout: &Layout, multiplier: f64, noise_stream: u64) -> Result<(CtVolume, GroundTruth)> {
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, sz] = spec.spacing;
    let n = nx * ny * nz;
    let mut hu = vec![AIR_HU; n];
    let mut lung_mask = Mask::empty(spec.dims);

    for z in 0..nz {
        let pz = voxel_center(z, sz);
        for y in 0..ny {
            let py = voxel_center(y, sy);
            for x in 0..nx {
                let px = voxel_center(x, sx);
                let p = [px, py, pz];
                let i = (z * ny + y) * nx + x;
                if layout.body.norm2(p) <= 1.0 {
                    hu[i] = BODY_HU;
                }
                let dx = px - layout.spine_center[0];
                let dy = py - layout.spine_center[1];
                if (dx * dx + dy * dy).sqrt() <= layout.spine_radius {
                    hu[i] = BONE_HU;
                }
                if layout.lungs.iter().any(|l| l.norm2(p) <= 1.0) {
                    hu[i] = LUNG_HU;
                    lung_mask.data_mut()[i] = true;
                }
            }
        }
    }

    let mut opacity = Mask::empty(spec.dims);
    let diffuse_fraction = (spec.diffuse_fraction * multiplier).min(1.0);
    if diffuse_fraction > 0.0 && !layout.field.is_empty() {
        let mut lung_voxels: Vec<usize> = (0..n).filter(|&i| lung_mask.data()[i]).collect();
        // highest field values first; ties broken by index for determinism
        lung_voxels.sort_by(|&a, &b| layout.field[b].total_cmp(&layout.field[a]).then(a.cmp(&b)));
        let take = (diffuse_fraction * lung_voxels.len() as f64).ceil() as usize;
        for &i in &lung_voxels[..take.min(lung_voxels.len())] {
            opacity.data_mut()[i] = true;
            hu[i] = LUNG_HU + spec.diffuse_hu_delta;
        }
    }

    let radius_scale = multiplier.cbrt();
    let mut focal = Vec::new();
    if multiplier > 0.0 {
        for lesion in &layout.focal {
            let r = lesion.radius_mm * radius_scale;
            let c = lesion.center_mm;
            let lo = [0, 1, 2].map(|a| (((c[a] - r) / spec.spacing[a]).floor().max(0.0)) as usize);
            let hi = [0, 1, 2].map(|a| {
                (((c[a] + r) / spec.spacing[a]).ceil() as usize).min(spec.dims[a] - 1)
            });
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let p = [voxel_center(x, sx), voxel_center(y, sy), voxel_center(z, sz)];
                        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        let i = (z * ny + y) * nx + x;
                        if d2 <= r * r && lung_mask.data()[i] {
                            opacity.data_mut()[i] = true;
                            hu[i] = spec.focal_hu;
                        }
                    }
                }
            }
            focal.push(FocalLesion::new(c, r));
        }
    }

    let voxels: Vec<i16> = if spec.noise_sigma > 0.0 {
        let mut rng = stream(spec.seed, STREAM_NOISE + noise_stream);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        hu.iter()
            .map(|&h| (h + normal.sample(&mut rng)).round().clamp(HU_MIN as f64, HU_MAX as f64) as i16)
            .collect()
    } else {
        hu.iter().map(|&h| h.round() as i16).collect()
    };

    let per_slice_abnormal = (0..nz).map(|z| opacity.slice_count(z) > 0).collect();
    let volume = CtVolume::new(spec.dims, spec.spacing, voxels)?;
    let gt = GroundTruth { lung_mask, opacity_mask: opacity, focal_lesions: focal, per_slice_abnormal };
    Ok((volume, gt))
}

/// Generates one phantom volume and its ground truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(CtVolume, GroundTruth)> {
    spec.validate()?;
    let layout = layout(spec, 1.0)?;
    render(spec, &layout, 1.0, 0)
}

/// One time point of a generated timeline.
#[derive(Debug, Clone)]
pub struct TimelinePoint {
    pub day_offset: i64,
    pub multiplier: f64,
    pub volume: CtVolume,
    pub truth: GroundTruth,
}

/// Generates a disease course over shared anatomy.
///
/// Each multiplier scales the disease *burden* relative to `spec`: focal
/// radii by its cube root (so lesion volume scales linearly) and diffuse
/// coverage linearly. A multiplier of 0 yields a healthy volume.
pub fn generate_timeline(spec: &PhantomSpec, course: &[f64], day_offsets: &[i64]) -> Result<Vec<TimelinePoint>> {
    spec.validate()?;
    if course.len() < 2 || course.len() != day_offsets.len() {
        return Err(PhantomError::InvalidSpec(format!(
            "course has {} entries for {} day offsets (need >= 2, equal)",
            course.len(),
            day_offsets.len()
        )));
    }
    if course.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(PhantomError::InvalidSpec("burden multipliers must be >= 0".into()));
    }
    if day_offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PhantomError::InvalidSpec("day offsets must increase".into()));
    }
    let max_m = course.iter().cloned().fold(1.0, f64::max);
    let layout = layout(spec, max_m)?;
    course
        .iter()
        .zip(day_offsets)
        .enumerate()
        .map(|(t, (&m, &day))| {
            let (volume, truth) = render(spec, &layout, m, t as u64)?;
            Ok(TimelinePoint { day_offset: day, multiplier: m, volume, truth })
        })
        .collect()
}

/// Sidecar paths for a volume at `path`: lung mask, opacity mask, JSON.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = path.with_extension("");
    let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", stem.display()));
    (with(".lung.gt.ctvol"), with(".opacity.gt.ctvol"), with(".gt.json"))
}

/// Writes a volume plus its ground-truth sidecars.
pub fn write_case(
    path: &Path,
    volume: &CtVolume,
    truth: &GroundTruth,
    spec: &PhantomSpec,
    multiplier: f64,
) -> Result<()> {
    write_ctvol_file(volume, path)?;
    let (lung, opacity, json) = sidecar_paths(path);
    write_ctvol_file(&truth.lung_mask.to_volume(volume.spacing())?, lung)?;
    write_ctvol_file(&truth.opacity_mask.to_volume(volume.spacing())?, opacity)?;
    let sidecar = GroundTruthSidecar {
        spec: spec.clone(),
        burden_multiplier: multiplier,
        focal_lesions: truth.focal_lesions.clone(),
        per_slice_abnormal: truth.per_slice_abnormal.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| PhantomError::IoFailure(e.to_string()))?;
    std::fs::write(json, text + "\n")?;
    Ok(())
}

/// Loads the ground truth written next to the volume at `path`.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let (lung, opacity, json) = sidecar_paths(path);
    let sidecar: GroundTruthSidecar = serde_json::from_slice(&std::fs::read(json)?)
        .map_err(|e| PhantomError::IoFailure(e.to_string()))?;
    Ok(GroundTruth {
        lung_mask: Mask::from_volume(&read_ctvol(lung)?),
        opacity_mask: Mask::from_volume(&read_ctvol(opacity)?),
        focal_lesions: sidecar.focal_lesions,
        per_slice_abnormal: sidecar.per_slice_abnormal,
    })
}

fn tag(volume: &mut CtVolume, study: &str, timepoint: usize, day: i64) {
    let mut meta = Metadata::new();
    meta.set("study_id", study);
    meta.set("timepoint", timepoint.to_string());
    meta.set("day_offset", day.to_string());
    volume.meta = meta;
}

/// Writes `n_cases` single-time-point studies plus `manifest.csv` into `out`.
///
/// `round(n_cases * positive_fraction)` studies are positive, each with a
/// random mix of focal lesions and diffuse opacity; the rest are healthy.
pub fn generate_dataset(
    n_cases: usize,
    positive_fraction: f64,
    template: &PhantomSpec,
    seed: u64,
    out: &Path,
) -> Result<StudyManifest> {
    if n_cases == 0 || !(0.0..=1.0).contains(&positive_fraction) {
        return Err(PhantomError::InvalidSpec(format!(
            "need n_cases >= 1 and positive_fraction in [0,1], got {n_cases}, {positive_fraction}"
        )));
    }
    template.validate()?;
    std::fs::create_dir_all(out)?;
    let n_pos = (n_cases as f64 * positive_fraction).round() as usize;
    let mut rng = stream(seed, 0);
    let mut positive: Vec<bool> = (0..n_cases).map(|i| i < n_pos).collect();
    positive.shuffle(&mut rng);

    let mut rows = Vec::with_capacity(n_cases);
    for (i, &is_pos) in positive.iter().enumerate() {
        let mut spec = template.clone();
        spec.seed = rng.random();
        if is_pos {
            spec.n_focal = rng.random_range(0..=3usize);
            spec.diffuse_fraction = if spec.n_focal > 0 && rng.random::<f64>() < 0.25 {
                0.0
            } else {
                rng.random_range(0.03..0.15)
            };
        } else {
            spec.n_focal = 0;
            spec.diffuse_fraction = 0.0;
        }
        let study = format!("case_{i:03}");
        let (mut volume, truth) = generate_phantom(&spec)?;
        tag(&mut volume, &study, 0, 0);
        let file = format!("{study}.ctvol");
        write_case(&out.join(&file), &volume, &truth, &spec, 1.0)?;
        rows.push(ManifestRow {
            study_id: study,
            timepoint: 0,
            day_offset: 0,
            path: file.into(),
            label: if is_pos { Label::Positive } else { Label::Negative },
        });
    }
    let manifest = StudyManifest { rows, base_dir: out.to_path_buf() };
    write_manifest(&manifest, out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Writes a timeline study into `out` and returns its manifest rows.
pub fn write_timeline(
    study: &str,
    spec: &PhantomSpec,
    course: &[f64],
    day_offsets: &[i64],
    out: &Path,
) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(out)?;
    let points = generate_timeline(spec, course, day_offsets)?;
    let mut rows = Vec::with_capacity(points.len());
    for (t, mut point) in points.into_iter().enumerate() {
        tag(&mut point.volume, study, t, point.day_offset);
        let file = format!("{study}_t{t}.ctvol");
        write_case(&out.join(&file), &point.volume, &point.truth, spec, point.multiplier)?;
        rows.push(ManifestRow {
            study_id: study.to_string(),
            timepoint: t as u32,
            day_offset: point.day_offset,
            path: file.into(),
            label: if point.multiplier > 0.0 { Label::Positive } else { Label::Negative },
        });
    }
    Ok(rows)
}
