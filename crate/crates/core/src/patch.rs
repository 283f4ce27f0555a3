//! Centred in-plane patches around a voxel, one per configured size.

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, Tensor};
use crate::volume::{Plane, Volume};

/// The multi-scale network input for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub coord: [usize; 3],
    /// `[1, s, s]` patches in the order of the requested sizes.
    pub patches: Vec<Tensor<f32>>,
}

/// Cuts a `size × size` patch centred on `coord` out of the slice through
/// `coord` in `plane`. Positions beyond the slice border are filled by
/// edge-repeating reflection.
pub fn extract_patch(volume: &Volume, coord: [usize; 3], size: usize, plane: Plane) -> Result<Tensor<f32>> {
    if size % 2 == 0 {
        return Err(Error::Input(format!("patch size {size} must be odd")));
    }
    if !volume.geometry.contains(coord) {
        return Err(Error::Input(format!(
            "coordinate {coord:?} outside volume {:?}",
            volume.geometry.extents
        )));
    }
    let (row_axis, col_axis, _) = plane.axes();
    let ext = volume.geometry.extents;
    let (nr, nc) = (ext[row_axis], ext[col_axis]);
    let half = (size / 2) as isize;
    let (r0, c0) = (coord[row_axis] as isize - half, coord[col_axis] as isize - half);
    let mut data = Vec::with_capacity(size * size);
    let mut pos = coord;
    let src = volume.data();
    let interior = r0 >= 0 && c0 >= 0 && r0 as usize + size <= nr && c0 as usize + size <= nc;
    for i in 0..size as isize {
        pos[row_axis] = if interior { (r0 + i) as usize } else { reflect_index(r0 + i, nr) };
        for j in 0..size as isize {
            pos[col_axis] = if interior { (c0 + j) as usize } else { reflect_index(c0 + j, nc) };
            data.push(src[volume.geometry.index(pos)]);
        }
    }
    Tensor::from_vec(&[1, size, size], data)
}

/// One patch per size, all centred on `coord`, from the volume's
/// acquisition plane.
pub fn extract_group(volume: &Volume, coord: [usize; 3], sizes: &[usize]) -> Result<PatchGroup> {
    let patches = sizes
        .iter()
        .map(|&s| extract_patch(volume, coord, s, volume.plane))
        .collect::<Result<_>>()?;
    Ok(PatchGroup { coord, patches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn ramp(ext: [usize; 3], plane: Plane) -> Volume {
        let g = Geometry::new(ext, [1.0; 3]).unwrap();
        let data = (0..g.len()).map(|i| i as f32).collect();
        Volume::new(g, plane, data).unwrap()
    }

    #[test]
    fn centred_window_covers_expected_indices() {
        let v = ramp([100, 60, 3], Plane::Axial);
        let p = extract_patch(&v, [50, 30, 1], 25, Plane::Axial).unwrap();
        // Columns run along x: 38..=62.
        assert_eq!(p.get(&[0, 12, 0]).unwrap(), v.at([38, 30, 1]));
        assert_eq!(p.get(&[0, 12, 24]).unwrap(), v.at([62, 30, 1]));
        assert_eq!(p.get(&[0, 0, 12]).unwrap(), v.at([50, 18, 1]));
    }

    #[test]
    fn corner_replicates_edge() {
        let v = ramp([5, 5, 1], Plane::Axial);
        let p = extract_patch(&v, [0, 0, 0], 3, Plane::Axial).unwrap();
        let corner = v.at([0, 0, 0]);
        assert_eq!(p.get(&[0, 0, 0]).unwrap(), corner);
        assert_eq!(p.get(&[0, 0, 1]).unwrap(), corner);
        assert_eq!(p.get(&[0, 1, 0]).unwrap(), corner);
        assert_eq!(p.get(&[0, 1, 1]).unwrap(), corner);
        assert_eq!(p.get(&[0, 2, 2]).unwrap(), v.at([1, 1, 0]));
    }

    #[test]
    fn size_one_is_voxel() {
        let v = ramp([4, 4, 4], Plane::Coronal);
        let p = extract_patch(&v, [1, 2, 3], 1, Plane::Coronal).unwrap();
        assert_eq!(p.data(), &[v.at([1, 2, 3])]);
    }

    #[test]
    fn rejects_even_size_and_outside_coord() {
        let v = ramp([4, 4, 4], Plane::Axial);
        assert!(extract_patch(&v, [1, 1, 1], 4, Plane::Axial).is_err());
        assert!(extract_patch(&v, [4, 1, 1], 3, Plane::Axial).is_err());
    }

    #[test]
    fn planes_use_their_own_axes() {
        let v = ramp([9, 9, 9], Plane::Axial);
        let c = [4, 4, 4];
        let cor = extract_patch(&v, c, 3, Plane::Coronal).unwrap();
        assert_eq!(cor.get(&[0, 0, 1]).unwrap(), v.at([4, 4, 3]));
        assert_eq!(cor.get(&[0, 1, 0]).unwrap(), v.at([3, 4, 4]));
        let sag = extract_patch(&v, c, 3, Plane::Sagittal).unwrap();
        assert_eq!(sag.get(&[0, 0, 1]).unwrap(), v.at([4, 4, 3]));
        assert_eq!(sag.get(&[0, 1, 0]).unwrap(), v.at([4, 3, 4]));
    }

    #[test]
    fn group_patches_share_center() {
        let v = ramp([90, 90, 2], Plane::Axial);
        let c = [45, 44, 1];
        let g = extract_group(&v, c, &[25, 51, 75]).unwrap();
        assert_eq!(g.patches.len(), 3);
        for (p, s) in g.patches.iter().zip([25usize, 51, 75]) {
            assert_eq!(p.shape(), &[1, s, s]);
            assert_eq!(p.get(&[0, s / 2, s / 2]).unwrap(), v.at(c));
        }
        let single = extract_group(&v, c, &[25]).unwrap();
        assert_eq!(single.patches.len(), 1);
    }

    proptest! {
        #[test]
        fn interior_patches_match_index_copy(
            nx in 8usize..20, ny in 8usize..20, nz in 1usize..4,
            half in 0usize..4, fx in 0.0f64..1.0, fy in 0.0f64..1.0, fz in 0.0f64..1.0,
        ) {
            let v = ramp([nx, ny, nz], Plane::Axial);
            let before = v.clone();
            let size = 2 * half + 1;
            let x = half + ((nx - 2 * half - 1) as f64 * fx) as usize;
            let y = half + ((ny - 2 * half - 1) as f64 * fy) as usize;
            let z = ((nz - 1) as f64 * fz) as usize;
            let p = extract_patch(&v, [x, y, z], size, Plane::Axial).unwrap();
            for i in 0..size {
                for j in 0..size {
                    prop_assert_eq!(p.get(&[0, i, j]).unwrap(), v.at([x - half + j, y - half + i, z]));
                }
            }
            prop_assert_eq!(v, before);
        }

        #[test]
        fn extents_always_match_request(nx in 1usize..12, ny in 1usize..12, half in 0usize..20, sx in 0usize..12, sy in 0usize..12) {
            let v = ramp([nx, ny, 1], Plane::Axial);
            let c = [sx % nx, sy % ny, 0];
            let p = extract_patch(&v, c, 2 * half + 1, Plane::Axial).unwrap();
            prop_assert_eq!(p.shape(), &[1, 2 * half + 1, 2 * half + 1]);
            prop_assert_eq!(p.get(&[0, half, half]).unwrap(), v.at(c));
        }
    }
}
