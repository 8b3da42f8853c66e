//! Binary volumes and the labeling/morphology operations built on them.

use crate::volume_io::{CtVolume, VolumeError};

/// A binary volume aligned with a [`CtVolume`] grid (x-fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![false; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<bool>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "mask length/dims mismatch");
        Self { dims, data }
    }

    /// Voxels of `v` that are non-zero.
    pub fn from_volume(v: &CtVolume) -> Self {
        Self { dims: v.dims(), data: v.voxels().iter().map(|&x| x != 0).collect() }
    }

    /// A 0/1 volume with the given spacing.
    pub fn to_volume(&self, spacing: [f64; 3]) -> Result<CtVolume, VolumeError> {
        CtVolume::new(self.dims, spacing, self.data.iter().map(|&b| b as i16).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn slice(&self, z: usize) -> &[bool] {
        let plane = self.dims[0] * self.dims[1];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn slice_count(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&b| b).count()
    }

    /// Decodes a flat index into (x, y, z).
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Inclusive bounding box `(min, max)` of set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let mut any = false;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                any = true;
                let c = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }
}

/// Connected-component labels; 0 is background, components are numbered
/// from 1 in raster order of their first voxel.
#[derive(Debug, Clone)]
pub struct Labels {
    pub labels: Vec<u32>,
    /// Voxel count per component, indexed by `label - 1`.
    pub sizes: Vec<usize>,
}

const FACE_NEIGHBORS: [[isize; 3]; 6] =
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// 6-connected component labeling by breadth-first flood fill.
pub fn label_components(mask: &Mask) -> Labels {
    let [nx, ny, nz] = mask.dims;
    let mut labels = vec![0u32; mask.data.len()];
    let mut sizes = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = mask.coords(i);
            for d in FACE_NEIGHBORS {
                let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize
                {
                    continue;
                }
                let j = mask.index(qx as usize, qy as usize, qz as usize);
                if mask.data[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    Labels { labels, sizes }
}

fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn dilate_with(mask: &Mask, offsets: &[[isize; 3]]) -> Mask {
    let [nx, ny, nz] = mask.dims;
    let mut out = Mask::empty(mask.dims);
    for (i, &b) in mask.data.iter().enumerate() {
        if !b {
            continue;
        }
        let [x, y, z] = mask.coords(i);
        for d in offsets {
            let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
            if qx >= 0 && qy >= 0 && qz >= 0 && qx < nx as isize && qy < ny as isize && qz < nz as isize {
                out.set(qx as usize, qy as usize, qz as usize, true);
            }
        }
    }
    out
}

/// Erosion that treats voxels beyond the volume edge as set, so that
/// `erode(dilate(m)) ⊇ m` holds at the borders too.
fn erode_with(mask: &Mask, offsets: &[[isize; 3]]) -> Mask {
    let [nx, ny, nz] = mask.dims;
    let mut out = mask.clone();
    for (i, &b) in mask.data.iter().enumerate() {
        if !b {
            continue;
        }
        let [x, y, z] = mask.coords(i);
        let keep = offsets.iter().all(|d| {
            let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                return true;
            }
            mask.get(qx as usize, qy as usize, qz as usize)
        });
        out.data[i] = keep;
    }
    out
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    dilate_with(mask, &ball_offsets(radius))
}

pub fn erode(mask: &Mask, radius: usize) -> Mask {
    erode_with(mask, &ball_offsets(radius))
}

/// Morphological closing with a voxel-unit ball.
pub fn close(mask: &Mask, radius: usize) -> Mask {
    let offsets = ball_offsets(radius);
    erode_with(&dilate_with(mask, &offsets), &offsets)
}

/// Fills background regions of each axial slice that are not 4-connected to
/// the slice border.
pub fn fill_holes_per_slice(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.dims;
    let mut out = mask.clone();
    let mut outside = vec![false; nx * ny];
    let mut stack = Vec::new();
    for z in 0..nz {
        let slice = mask.slice(z);
        outside.iter_mut().for_each(|o| *o = false);
        for x in 0..nx {
            for y in [0, ny - 1] {
                stack.push((x, y));
            }
        }
        for y in 0..ny {
            for x in [0, nx - 1] {
                stack.push((x, y));
            }
        }
        while let Some((x, y)) = stack.pop() {
            let i = y * nx + x;
            if slice[i] || outside[i] {
                continue;
            }
            outside[i] = true;
            if x > 0 {
                stack.push((x - 1, y));
            }
            if x + 1 < nx {
                stack.push((x + 1, y));
            }
            if y > 0 {
                stack.push((x, y - 1));
            }
            if y + 1 < ny {
                stack.push((x, y + 1));
            }
        }
        let plane = nx * ny;
        for i in 0..plane {
            if !slice[i] && !outside[i] {
                out.data[z * plane + i] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mask(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Mask {
        let mut m = Mask::empty(dims);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    m.set(x, y, z, true);
                }
            }
        }
        m
    }

    #[test]
    fn two_cubes_two_components() {
        let mut m = cube_mask([10, 10, 10], [0, 0, 0], [2, 2, 2]);
        m.union_with(&cube_mask([10, 10, 10], [5, 5, 5], [8, 8, 8]));
        let l = label_components(&m);
        assert_eq!(l.sizes, vec![27, 64]);
        assert_eq!(l.labels[m.index(1, 1, 1)], 1);
        assert_eq!(l.labels[m.index(6, 6, 6)], 2);
    }

    #[test]
    fn diagonal_voxels_are_not_face_connected() {
        let mut m = Mask::empty([3, 3, 1]);
        m.set(0, 0, 0, true);
        m.set(1, 1, 0, true);
        assert_eq!(label_components(&m).sizes.len(), 2);
    }

    #[test]
    fn hole_fill_closes_ring() {
        let mut m = cube_mask([7, 7, 1], [1, 1, 0], [5, 5, 0]);
        m.set(3, 3, 0, false);
        m.set(2, 3, 0, false);
        let f = fill_holes_per_slice(&m);
        assert_eq!(f, cube_mask([7, 7, 1], [1, 1, 0], [5, 5, 0]));
    }

    #[test]
    fn closing_is_extensive_and_bridges_small_gaps() {
        let mut m = cube_mask([12, 12, 12], [2, 2, 2], [4, 9, 9]);
        m.union_with(&cube_mask([12, 12, 12], [6, 2, 2], [9, 9, 9]));
        let c = close(&m, 2);
        assert!(m.is_subset_of(&c));
        assert!(c.get(5, 5, 5));
        assert_eq!(label_components(&c).sizes.len(), 1);
    }

    #[test]
    fn closing_of_a_box_touching_the_border_keeps_it() {
        let m = cube_mask([6, 6, 6], [0, 0, 0], [5, 5, 2]);
        assert_eq!(close(&m, 2), m);
    }

    #[test]
    fn bounding_box_and_counts() {
        let m = cube_mask([8, 8, 8], [1, 2, 3], [4, 5, 6]);
        assert_eq!(m.bounding_box(), Some(([1, 2, 3], [4, 5, 6])));
        assert_eq!(m.count(), 64);
        assert_eq!(m.slice_count(3), 16);
        assert_eq!(Mask::empty([2, 2, 2]).bounding_box(), None);
    }
}
