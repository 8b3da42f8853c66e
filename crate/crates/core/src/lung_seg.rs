//! Classical lung segmentation: threshold, 3D components, border rejection,
//! per-slice hole filling and a closing.

use thiserror::Error;

use crate::mask::{self, Mask};
use crate::volume_io::{axis_nearest, CtVolume, VolumeError};

/// Voxels below this HU are lung/air candidates.
pub const LUNG_THRESHOLD_HU: i16 = -320;
/// Smallest component accepted as a lung, cm³.
pub const MIN_LUNG_CM3: f64 = 50.0;
/// Slices with at least this much lung area count towards the lung slice set.
pub const LUNG_SLICE_AREA_MM2: f64 = 300.0;
pub const CLOSING_RADIUS_VOXELS: usize = 2;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("no lung component of at least {MIN_LUNG_CM3} cm³ found")]
    NoLungFound,
    #[error("mask is empty")]
    EmptyMask,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LungMask {
    pub mask: Mask,
    pub spacing: [f64; 3],
    pub per_slice_area_mm2: Vec<f64>,
    /// Slice indices whose lung area reaches [`LUNG_SLICE_AREA_MM2`].
    pub lung_slice_set: Vec<usize>,
}

impl LungMask {
    pub fn from_mask(mask: Mask, spacing: [f64; 3]) -> Self {
        let nz = mask.dims()[2];
        let per_slice_area_mm2: Vec<f64> =
            (0..nz).map(|z| mask.slice_count(z) as f64 * spacing[0] * spacing[1]).collect();
        let lung_slice_set = per_slice_area_mm2
            .iter()
            .enumerate()
            .filter(|(_, &a)| a >= LUNG_SLICE_AREA_MM2)
            .map(|(z, _)| z)
            .collect();
        Self { mask, spacing, per_slice_area_mm2, lung_slice_set }
    }

    pub fn volume_cm3(&self) -> f64 {
        self.mask.count() as f64 * self.spacing.iter().product::<f64>() / 1000.0
    }
}

pub fn segment_lungs(v: &CtVolume) -> Result<LungMask> {
    let dims = v.dims();
    let [nx, ny, _] = dims;
    let voxel_cm3 = v.voxel_volume_mm3() / 1000.0;
    let candidates = Mask::from_vec(dims, v.voxels().iter().map(|&hu| hu < LUNG_THRESHOLD_HU).collect());
    let labels = mask::label_components(&candidates);

    let mut touches_border = vec![false; labels.sizes.len()];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let [x, y, _] = candidates.coords(i);
        if x == 0 || y == 0 || x == nx - 1 || y == ny - 1 {
            touches_border[l as usize - 1] = true;
        }
    }
    let mut kept: Vec<(usize, u32)> = labels
        .sizes
        .iter()
        .enumerate()
        .filter(|(k, &size)| !touches_border[*k] && size as f64 * voxel_cm3 >= MIN_LUNG_CM3)
        .map(|(k, &size)| (size, k as u32 + 1))
        .collect();
    if kept.is_empty() {
        return Err(SegError::NoLungFound);
    }
    // largest first; lower label wins ties
    kept.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    kept.truncate(2);
    let keep: Vec<u32> = kept.iter().map(|&(_, l)| l).collect();

    let lungs = Mask::from_vec(dims, labels.labels.iter().map(|l| keep.contains(l)).collect());
    let filled = mask::fill_holes_per_slice(&lungs);
    let closed = mask::close(&filled, CLOSING_RADIUS_VOXELS);
    Ok(LungMask::from_mask(closed, v.spacing()))
}

/// Placement of a crop inside its source volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOffset(pub [usize; 3]);

/// Crops `v` to the bounding box of `m`, grown by `pad_mm` per side and
/// clamped to the volume.
pub fn crop_to_lungs(v: &CtVolume, m: &LungMask, pad_mm: f64) -> Result<(CtVolume, CropOffset)> {
    if m.mask.dims() != v.dims() {
        return Err(SegError::DimMismatch(m.mask.dims(), v.dims()));
    }
    let (lo, hi) = m.mask.bounding_box().ok_or(SegError::EmptyMask)?;
    let dims = v.dims();
    let sp = v.spacing();
    let mut start = [0; 3];
    let mut size = [0; 3];
    for a in 0..3 {
        let pad = (pad_mm.max(0.0) / sp[a]).ceil() as usize;
        start[a] = lo[a].saturating_sub(pad);
        let end = (hi[a] + pad).min(dims[a] - 1);
        size[a] = end - start[a] + 1;
    }
    let mut voxels = Vec::with_capacity(size.iter().product());
    for z in start[2]..start[2] + size[2] {
        for y in start[1]..start[1] + size[1] {
            let row = v.index(start[0], y, z);
            voxels.extend_from_slice(&v.voxels()[row..row + size[0]]);
        }
    }
    let crop = CtVolume::new(size, sp, voxels)?.with_meta(v.meta.clone());
    Ok((crop, CropOffset(start)))
}

/// Writes `crop` into `target` at `offset`.
pub fn paste_back(target: &mut CtVolume, crop: &CtVolume, offset: CropOffset) -> Result<()> {
    let [cx, cy, cz] = crop.dims();
    let o = offset.0;
    let t = target.dims();
    if (0..3).any(|a| o[a] + crop.dims()[a] > t[a]) {
        return Err(SegError::DimMismatch(crop.dims(), t));
    }
    for z in 0..cz {
        for y in 0..cy {
            let dst = target.index(o[0], o[1] + y, o[2] + z);
            let src = crop.index(0, y, z);
            target.voxels_mut()[dst..dst + cx].copy_from_slice(&crop.voxels()[src..src + cx]);
        }
    }
    Ok(())
}

/// Dice overlap `2|a∩b| / (|a|+|b|)`; 1.0 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(SegError::DimMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Nearest-neighbor resampling of a mask from `spacing` to `target`, on the
/// same center-aligned grid as [`crate::volume_io::resample_volume`].
pub fn resample_mask(m: &Mask, spacing: [f64; 3], target: [f64; 3]) -> Mask {
    let d = m.dims();
    let maps: Vec<Vec<usize>> = (0..3).map(|a| axis_nearest(d[a], spacing[a], target[a])).collect();
    let out_dims = [maps[0].len(), maps[1].len(), maps[2].len()];
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &z in &maps[2] {
        for &y in &maps[1] {
            for &x in &maps[0] {
                data.push(m.get(x, y, z));
            }
        }
    }
    Mask::from_vec(out_dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec { dims: [96, 96, 32], spacing: [3.3, 3.3, 7.5], seed, ..PhantomSpec::default() }
    }

    #[test]
    fn phantom_lungs_segment_with_high_dice() {
        let (v, gt) = generate_phantom(&PhantomSpec { n_focal: 2, diffuse_fraction: 0.05, ..spec(1) }).unwrap();
        let m = segment_lungs(&v).unwrap();
        let d = dice(&m.mask, &gt.lung_mask).unwrap();
        assert!(d >= 0.95, "dice {d}");
        for lesion in &gt.focal_lesions {
            let c = lesion.center_mm;
            let sp = v.spacing();
            let idx = [0, 1, 2].map(|a| (c[a] / sp[a]) as usize);
            assert!(m.mask.get(idx[0], idx[1], idx[2]));
        }
        assert!(!m.lung_slice_set.is_empty());
        for (z, &area) in m.per_slice_area_mm2.iter().enumerate() {
            assert_eq!(m.lung_slice_set.contains(&z), area >= LUNG_SLICE_AREA_MM2);
        }
    }

    #[test]
    fn soft_tissue_and_air_volumes_have_no_lungs() {
        let tissue = CtVolume::filled([32, 32, 8], [5.0, 5.0, 5.0], 40).unwrap();
        assert!(matches!(segment_lungs(&tissue), Err(SegError::NoLungFound)));
        let air = CtVolume::filled([32, 32, 8], [5.0, 5.0, 5.0], -1000).unwrap();
        assert!(matches!(segment_lungs(&air), Err(SegError::NoLungFound)));
    }

    #[test]
    fn threshold_local_hu_shift_leaves_mask_unchanged() {
        let (v, _) = generate_phantom(&spec(2)).unwrap();
        let base = segment_lungs(&v).unwrap();
        // phantom voxels sit far from -320 HU, so a +/-100 HU shift crosses nothing
        for shift in [-100i16, 100] {
            let mut s = v.clone();
            let crosses = v.voxels().iter().any(|&h| (h < LUNG_THRESHOLD_HU) != (h.saturating_add(shift).clamp(-1024, 3071) < LUNG_THRESHOLD_HU));
            if crosses {
                continue;
            }
            s.voxels_mut().iter_mut().for_each(|h| *h = (*h + shift).clamp(-1024, 3071));
            assert_eq!(segment_lungs(&s).unwrap().mask, base.mask);
        }
        let mut tagged = v.clone();
        tagged.meta.set("study_id", "other");
        assert_eq!(segment_lungs(&tagged).unwrap(), base);
    }

    #[test]
    fn crop_cases() {
        let v = CtVolume::new([4, 3, 2], [1.0, 1.0, 2.0], (0..24).collect()).unwrap();
        let full = LungMask::from_mask(Mask::from_vec([4, 3, 2], vec![true; 24]), v.spacing());
        let (c, off) = crop_to_lungs(&v, &full, 5.0).unwrap();
        assert_eq!(off, CropOffset([0, 0, 0]));
        assert_eq!(c, v);

        let mut one = Mask::empty([4, 3, 2]);
        one.set(2, 1, 1, true);
        let single = LungMask::from_mask(one, v.spacing());
        let (c, off) = crop_to_lungs(&v, &single, 0.0).unwrap();
        assert_eq!(c.dims(), [1, 1, 1]);
        assert_eq!(off, CropOffset([2, 1, 1]));
        assert_eq!(c.voxels(), &[v.get(2, 1, 1)]);

        let empty = LungMask::from_mask(Mask::empty([4, 3, 2]), v.spacing());
        assert!(matches!(crop_to_lungs(&v, &empty, 0.0), Err(SegError::EmptyMask)));
    }

    #[test]
    fn paste_then_recrop_is_idempotent() {
        let v = CtVolume::new([6, 5, 4], [1.0; 3], (0..120).map(|i| i as i16).collect()).unwrap();
        let mut m = Mask::empty([6, 5, 4]);
        m.set(2, 1, 1, true);
        m.set(4, 3, 2, true);
        let lm = LungMask::from_mask(m, v.spacing());
        let (crop, off) = crop_to_lungs(&v, &lm, 0.0).unwrap();
        let mut canvas = CtVolume::filled([6, 5, 4], [1.0; 3], 0).unwrap();
        paste_back(&mut canvas, &crop, off).unwrap();
        let (again, off2) = crop_to_lungs(&canvas, &lm, 0.0).unwrap();
        assert_eq!(off, off2);
        assert_eq!(again.voxels(), crop.voxels());
    }

    #[test]
    fn dice_cases() {
        let mut a = Mask::empty([10, 10, 2]);
        let mut b = Mask::empty([10, 10, 2]);
        assert_eq!(dice(&a, &b).unwrap(), 1.0);
        for i in 0..100 {
            a.data_mut()[i] = true;
            b.data_mut()[i + 50] = true;
        }
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let mut c = Mask::empty([10, 10, 2]);
        c.data_mut()[150] = true;
        let mut d = Mask::empty([10, 10, 2]);
        d.data_mut()[0] = true;
        assert_eq!(dice(&c, &d).unwrap(), 0.0);
        assert!(dice(&a, &Mask::empty([10, 10, 1])).is_err());
    }

    #[test]
    fn mask_resampling_stays_binary_and_aligned() {
        let mut m = Mask::empty([4, 4, 2]);
        m.set(1, 1, 1, true);
        let r = resample_mask(&m, [1.0, 1.0, 5.0], [1.0, 1.0, 2.5]);
        assert_eq!(r.dims(), [4, 4, 4]);
        assert!(r.get(1, 1, 2) && r.get(1, 1, 3));
        assert_eq!(r.count(), 2);
    }
}
