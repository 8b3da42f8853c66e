use super::{CtVolume, Result, VolumeError};

/// Output size and per-output-index source coordinate along one axis.
///
/// Voxel centers are aligned: output voxel `i` sits at physical position
/// `(i + 0.5) * target`, which maps to continuous source index
/// `(i + 0.5) * target / source - 0.5`, clamped to the source range.
pub(crate) fn axis_map(n: usize, source: f64, target: f64) -> Vec<(usize, usize, f64)> {
    let out_n = ((n as f64 * source / target).round() as usize).max(1);
    let ratio = target / source;
    (0..out_n)
        .map(|i| {
            let t = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = t.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, t - lo as f64)
        })
        .collect()
}

/// Nearest source index per output index along one axis, on the same grid
/// as [`axis_map`].
pub fn axis_nearest(n: usize, source: f64, target: f64) -> Vec<usize> {
    axis_map(n, source, target)
        .into_iter()
        .map(|(lo, hi, f)| if f < 0.5 { lo } else { hi })
        .collect()
}

/// Trilinear resampling of `v` onto a grid with `target` spacing.
///
/// Output dims are `round(dim * spacing / target)`, at least 1 per axis.
pub fn resample_volume(v: &CtVolume, target: [f64; 3]) -> Result<CtVolume> {
    if target.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(VolumeError::InvalidVolume(format!("bad target spacing {target:?}")));
    }
    let [nx, ny, nz] = v.dims();
    let sp = v.spacing();
    let mx = axis_map(nx, sp[0], target[0]);
    let my = axis_map(ny, sp[1], target[1]);
    let mz = axis_map(nz, sp[2], target[2]);
    if mx.is_empty() || my.is_empty() || mz.is_empty() {
        return Err(VolumeError::EmptyOutput);
    }

    let src = v.voxels();
    let at = |x: usize, y: usize, z: usize| src[(z * ny + y) * nx + x] as f64;
    let mut out = Vec::with_capacity(mx.len() * my.len() * mz.len());
    for &(z0, z1, fz) in &mz {
        for &(y0, y1, fy) in &my {
            for &(x0, x1, fx) in &mx {
                let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                let c0 = lerp(c00, c10, fy);
                let c1 = lerp(c01, c11, fy);
                out.push(lerp(c0, c1, fz).round() as i16);
            }
        }
    }
    let vol = CtVolume::new([mx.len(), my.len(), mz.len()], target, out)?;
    Ok(vol.with_meta(v.meta.clone()))
}
