use super::{ClassifierError, Preprocessing, Result, SliceSample};
use crate::lung_seg::LungMask;
use crate::volume_io::CtVolume;

/// In-plane crop rectangle in slice pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SliceCrop {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// A classifier input plus what is needed to map results back onto the slice.
#[derive(Debug, Clone)]
pub struct PreparedSlice {
    pub sample: SliceSample,
    pub crop: SliceCrop,
    /// (nx, ny) of the source slice.
    pub slice_dims: [usize; 2],
    /// Lung mask of the source slice, x-fastest.
    pub lung: Vec<bool>,
    /// No lung pixel on this slice: the image is all zeros.
    pub all_background: bool,
}

/// The in-plane bounding box of the whole lung mask, grown by `pad_mm`.
///
/// One box per volume keeps the pixel scale identical across slices.
pub fn lung_crop(mask: &LungMask, pad_mm: f64) -> Result<SliceCrop> {
    let (lo, hi) = mask.mask.bounding_box().ok_or(ClassifierError::EmptyMaskSlice)?;
    let dims = mask.mask.dims();
    let grow = |a: usize| {
        let pad = (pad_mm.max(0.0) / mask.spacing[a]).ceil() as usize;
        let start = lo[a].saturating_sub(pad);
        let end = (hi[a] + pad).min(dims[a] - 1);
        (start, end - start + 1)
    };
    let (x0, width) = grow(0);
    let (y0, height) = grow(1);
    Ok(SliceCrop { x0, y0, width, height })
}

/// Bilinear resize of a `w`×`h` image to `out_w`×`out_h` with pixel-center
/// alignment and edge clamping.
pub fn bilinear_resize(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(w, out_w);
    let ys = taps(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

/// Crops slice `z` to the lung box, zeroes non-lung pixels, windows and
/// resizes to the model input size.
pub fn preprocess_slice(v: &CtVolume, mask: &LungMask, z: usize, prep: &Preprocessing) -> Result<PreparedSlice> {
    let crop = lung_crop(mask, prep.crop_pad_mm)?;
    preprocess_slice_in(v, mask, z, crop, prep)
}

/// [`preprocess_slice`] with a precomputed crop box.
pub fn preprocess_slice_in(
    v: &CtVolume,
    mask: &LungMask,
    z: usize,
    crop: SliceCrop,
    prep: &Preprocessing,
) -> Result<PreparedSlice> {
    let [nx, ny, nz] = v.dims();
    if mask.mask.dims() != v.dims() {
        return Err(crate::lung_seg::SegError::DimMismatch(mask.mask.dims(), v.dims()).into());
    }
    if z >= nz || crop.x0 + crop.width > nx || crop.y0 + crop.height > ny {
        return Err(ClassifierError::InvalidConfig(format!("slice {z} or crop {crop:?} outside the volume")));
    }
    let hu = v.slice(z);
    let lung = mask.mask.slice(z);
    let mut patch = Vec::with_capacity(crop.width * crop.height);
    for y in crop.y0..crop.y0 + crop.height {
        for x in crop.x0..crop.x0 + crop.width {
            let i = y * nx + x;
            patch.push(if lung[i] { prep.window.apply(hu[i] as f32) } else { 0.0 });
        }
    }
    let size = prep.input_size;
    let image = bilinear_resize(&patch, crop.width, crop.height, size, size);
    Ok(PreparedSlice {
        sample: SliceSample { image, size, abnormal: false, study_id: v.meta.get("study_id").unwrap_or("").to_string(), z },
        crop,
        slice_dims: [nx, ny],
        lung: lung.to_vec(),
        all_background: !lung.iter().any(|&b| b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lung_seg::segment_lungs;
    use crate::mask::Mask;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::volume_io::HuWindow;

    fn prep(size: usize) -> Preprocessing {
        Preprocessing { window: HuWindow::default(), input_size: size, crop_pad_mm: 5.0 }
    }

    #[test]
    fn full_coverage_crop_is_whole_slice() {
        let v = CtVolume::filled([6, 4, 2], [1.0; 3], -300).unwrap();
        let m = LungMask::from_mask(Mask::from_vec([6, 4, 2], vec![true; 48]), [1.0; 3]);
        let p = preprocess_slice(&v, &m, 1, &prep(6)).unwrap();
        assert_eq!(p.crop, SliceCrop { x0: 0, y0: 0, width: 6, height: 4 });
        assert!(p.sample.image.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn background_pixels_are_exactly_zero() {
        let mut data = vec![false; 64];
        for y in 2..6 {
            for x in 2..6 {
                data[y * 8 + x] = true;
            }
        }
        let v = CtVolume::filled([8, 8, 1], [1.0; 3], 200).unwrap();
        let m = LungMask::from_mask(Mask::from_vec([8, 8, 1], data), [1.0; 3]);
        let p = preprocess_slice(&v, &m, 0, &prep(8)).unwrap();
        // the padded box covers everything, so pixels map 1:1
        assert_eq!(p.crop.width, 8);
        for (i, &px) in p.sample.image.iter().enumerate() {
            let inside = (2..6).contains(&(i % 8)) && (2..6).contains(&(i / 8));
            assert_eq!(px, if inside { 1200.0 / 1400.0 } else { 0.0 });
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let v = CtVolume::filled([4, 4, 1], [1.0; 3], 0).unwrap();
        let m = LungMask::from_mask(Mask::empty([4, 4, 1]), [1.0; 3]);
        assert!(matches!(preprocess_slice(&v, &m, 0, &prep(4)), Err(ClassifierError::EmptyMaskSlice)));
    }

    #[test]
    fn non_lung_slice_flagged_all_background() {
        let mut data = vec![false; 32];
        data[3] = true;
        let v = CtVolume::filled([4, 4, 2], [1.0; 3], 0).unwrap();
        let m = LungMask::from_mask(Mask::from_vec([4, 4, 2], data), [1.0; 3]);
        let p = preprocess_slice(&v, &m, 1, &prep(4)).unwrap();
        assert!(p.all_background);
        assert!(p.sample.image.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lesion_pixels_brighter_than_lung() {
        let spec = PhantomSpec {
            dims: [64, 64, 24],
            spacing: [5.0, 5.0, 10.0],
            noise_sigma: 0.0,
            diffuse_fraction: 0.1,
            seed: 3,
            ..Default::default()
        };
        let (v, gt) = generate_phantom(&spec).unwrap();
        let m = segment_lungs(&v).unwrap();
        let z = (0..24).max_by_key(|&z| gt.opacity_mask.slice_count(z)).unwrap();
        // a whole-slice box at input size 64 maps pixels 1:1
        let crop = SliceCrop { x0: 0, y0: 0, width: 64, height: 64 };
        let p = preprocess_slice_in(&v, &m, z, crop, &prep(64)).unwrap();
        let (mut lesion, mut lung) = (Vec::new(), Vec::new());
        for (i, &px) in p.sample.image.iter().enumerate() {
            if gt.opacity_mask.slice(z)[i] && m.mask.slice(z)[i] {
                lesion.push(px);
            } else if m.mask.slice(z)[i] {
                lung.push(px);
            }
        }
        assert!(!lesion.is_empty() && !lung.is_empty());
        let min_lesion = lesion.iter().cloned().fold(f32::INFINITY, f32::min);
        let max_lung = lung.iter().cloned().fold(0.0f32, f32::max);
        assert!(min_lesion > max_lung, "{min_lesion} vs {max_lung}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(bilinear_resize(&src, 4, 3, 4, 3), src);
        let c = bilinear_resize(&[0.25; 6], 3, 2, 7, 5);
        assert!(c.iter().all(|&v| v == 0.25));
    }
}
