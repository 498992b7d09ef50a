//! Component-size filtering of predicted segmentations.

use std::collections::VecDeque;

use crate::coordunet::FeatureGrid;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume, BACKGROUND};

pub const DEFAULT_MIN_THALAMUS_SIZE: usize = 200;
pub const DEFAULT_MIN_FRAGMENT_SIZE: usize = 10;
const MAX_NUCLEUS: u8 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::invalid(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Labeled components: `ids` holds 0 for background and `1..=sizes.len()`
/// otherwise, numbered in raster order of each component's first voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub ids: Volume<u32>,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Voxel indices of every component, each list in raster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &id) in self.ids.data().iter().enumerate() {
            if id > 0 {
                out[id as usize - 1].push(i);
            }
        }
        out
    }
}

fn neighbours(dims: [usize; 3], i: usize, offsets: &[[isize; 3]]) -> impl Iterator<Item = usize> + '_ {
    let x = (i % dims[0]) as isize;
    let y = ((i / dims[0]) % dims[1]) as isize;
    let z = (i / (dims[0] * dims[1])) as isize;
    offsets.iter().filter_map(move |o| {
        let (nx, ny, nz) = (x + o[0], y + o[1], z + o[2]);
        if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as isize || ny >= dims[1] as isize || nz >= dims[2] as isize {
            None
        } else {
            Some(nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize))
        }
    })
}

/// Components of the voxels where `foreground` holds.
pub fn components_where<T: Copy>(v: &Volume<T>, conn: Connectivity, foreground: impl Fn(T) -> bool) -> Components {
    let dims = v.dims();
    let offsets = conn.offsets();
    let mut ids = vec![0u32; v.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..v.len() {
        if ids[start] != 0 || !foreground(v.data()[start]) {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(dims, i, &offsets) {
                if ids[j] == 0 && foreground(v.data()[j]) {
                    ids[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    Components {
        ids: v.same_grid(ids),
        sizes,
    }
}

/// Components of the nonzero voxels of `mask`.
pub fn connected_components(mask: &LabelVolume, conn: Connectivity) -> Components {
    components_where(mask, conn, |c| c != BACKGROUND)
}

fn check_nuclei(seg: &LabelVolume) -> Result<()> {
    match seg.data().iter().position(|&c| c > MAX_NUCLEUS) {
        Some(i) => Err(Error::LabelOutOfRange {
            code: seg.data()[i] as u32,
            offset: i,
        }),
        None => Ok(()),
    }
}

/// Remove 6-connected components of the combined nuclei (codes 1..13)
/// smaller than `min_size` voxels.
pub fn thalamus_filter(seg: &LabelVolume, min_size: usize) -> Result<LabelVolume> {
    check_nuclei(seg)?;
    let comps = connected_components(seg, Connectivity::Six);
    let mut out = seg.clone();
    for (o, &id) in out.data_mut().iter_mut().zip(comps.ids.data()) {
        if id > 0 && comps.sizes[id as usize - 1] < min_size {
            *o = BACKGROUND;
        }
    }
    Ok(out)
}

/// Reassign small fragments of each nucleus.
///
/// For every class in ascending order, each 6-connected fragment smaller
/// than `min_size` (raster order) is relabeled voxel by voxel: the new class
/// is the most probable one, by that voxel's own probabilities, among the
/// nuclei present on its 6-neighbours outside the fragment. Voxels without
/// such a neighbour become background. Fragments see the segmentation as
/// updated by the fragments before them.
pub fn nucleus_refine(seg: &LabelVolume, probs: &FeatureGrid, min_size: usize) -> Result<LabelVolume> {
    check_nuclei(seg)?;
    let [nx, ny, nz] = seg.dims();
    if probs.batch() != 1 || probs.channels() <= MAX_NUCLEUS as usize || probs.spatial() != [nz, ny, nx] {
        return Err(Error::Shape(format!(
            "probabilities {:?} do not match segmentation {:?}",
            probs.shape(),
            seg.dims()
        )));
    }
    let dims = seg.dims();
    let six = Connectivity::Six.offsets();
    let mut out = seg.clone();
    let mut in_fragment = vec![false; seg.len()];
    for class in 1..=MAX_NUCLEUS {
        let comps = components_where(&out, Connectivity::Six, |c| c == class);
        for (k, members) in comps.members().into_iter().enumerate() {
            if comps.sizes[k] >= min_size {
                continue;
            }
            for &i in &members {
                in_fragment[i] = true;
            }
            let mut updates = Vec::with_capacity(members.len());
            for &i in &members {
                let mut best: Option<u8> = None;
                for j in neighbours(dims, i, &six) {
                    let c = out.data()[j];
                    if in_fragment[j] || c == BACKGROUND || c == class {
                        continue;
                    }
                    let p = probs.channel(0, c as usize)[i];
                    best = match best {
                        Some(b) if {
                            let pb = probs.channel(0, b as usize)[i];
                            pb > p || (pb == p && b < c)
                        } => Some(b),
                        _ => Some(c),
                    };
                }
                updates.push((i, best.unwrap_or(BACKGROUND)));
            }
            for &i in &members {
                in_fragment[i] = false;
            }
            for (i, c) in updates {
                out.data_mut()[i] = c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(dims: [usize; 3], n: usize, code: u8) -> LabelVolume {
        // first n voxels in raster order of a compact block starting at the origin
        let mut v = LabelVolume::filled(dims, 0);
        let side = 8;
        let mut placed = 0;
        'outer: for z in 0..dims[2] {
            for y in 0..side {
                for x in 0..side {
                    if placed == n {
                        break 'outer;
                    }
                    v.set(x, y, z, code);
                    placed += 1;
                }
            }
        }
        v
    }

    #[test]
    fn face_and_corner_contacts() {
        let mut v = LabelVolume::filled([3, 3, 3], 0);
        v.set(0, 0, 0, 1);
        v.set(1, 0, 0, 1);
        assert_eq!(connected_components(&v, Connectivity::Six).count(), 1);
        assert_eq!(connected_components(&v, Connectivity::TwentySix).count(), 1);
        let mut v = LabelVolume::filled([3, 3, 3], 0);
        v.set(0, 0, 0, 1);
        v.set(1, 1, 1, 1);
        assert_eq!(connected_components(&v, Connectivity::Six).count(), 2);
        assert_eq!(connected_components(&v, Connectivity::TwentySix).count(), 1);
    }

    #[test]
    fn solid_cube_and_dense_ids() {
        let c = connected_components(&LabelVolume::filled([10, 10, 10], 3), Connectivity::Six);
        assert_eq!(c.sizes, vec![1000]);
        let mut v = LabelVolume::filled([5, 1, 1], 0);
        v.data_mut().copy_from_slice(&[0, 2, 0, 7, 7]);
        let c = connected_components(&v, Connectivity::Six);
        assert_eq!(c.ids.data(), &[0, 1, 0, 2, 2]);
        assert_eq!(c.sizes, vec![1, 2]);
        assert!(Connectivity::try_from(18).is_err());
    }

    #[test]
    fn thalamus_size_boundary() {
        let dims = [20, 20, 20];
        assert_eq!(thalamus_filter(&blob(dims, 199, 4), 200).unwrap().count(4), 0);
        let kept = blob(dims, 200, 4);
        assert_eq!(thalamus_filter(&kept, 200).unwrap(), kept);
        let empty = LabelVolume::filled(dims, 0);
        assert_eq!(thalamus_filter(&empty, 200).unwrap(), empty);
        assert!(thalamus_filter(&LabelVolume::filled(dims, 100), 200).is_err());
    }

    #[test]
    fn thalamus_filter_is_idempotent_and_shrinking() {
        let mut v = blob([20, 20, 20], 250, 2);
        v.set(15, 15, 15, 5);
        v.set(16, 15, 15, 6);
        let once = thalamus_filter(&v, 200).unwrap();
        assert_eq!(thalamus_filter(&once, 200).unwrap(), once);
        assert_eq!(once.count(5) + once.count(6), 0);
        assert_eq!(once.count(2), 250);
    }

    fn probs_favouring(dims: [usize; 3], class: usize) -> FeatureGrid {
        let mut p = FeatureGrid::zeros([1, 14, dims[2], dims[1], dims[0]]);
        for c in 0..14 {
            p.channel_mut(0, c).fill(if c == class { 0.9 } else { 0.1 / 13.0 });
        }
        p
    }

    #[test]
    fn small_fragment_joins_surrounding_class() {
        let dims = [9, 9, 9];
        let mut seg = LabelVolume::filled(dims, 2);
        for x in 0..9 {
            seg.set(x, 4, 4, 5);
        }
        let out = nucleus_refine(&seg, &probs_favouring(dims, 2), 10).unwrap();
        assert_eq!(out, LabelVolume::filled(dims, 2));

        let mut seg = LabelVolume::filled([12, 9, 9], 2);
        for x in 0..10 {
            seg.set(x, 4, 4, 5);
        }
        let out = nucleus_refine(&seg, &probs_favouring([12, 9, 9], 2), 10).unwrap();
        assert_eq!(out, seg);
    }

    #[test]
    fn isolated_fragment_becomes_background() {
        let dims = [6, 6, 6];
        let mut seg = LabelVolume::filled(dims, 0);
        seg.set(2, 2, 2, 7);
        seg.set(3, 2, 2, 7);
        let mut p = FeatureGrid::zeros([1, 14, 6, 6, 6]);
        p.channel_mut(0, 0).fill(1.0);
        let out = nucleus_refine(&seg, &p, 10).unwrap();
        assert_eq!(out.count(7), 0);
        assert_eq!(out.count(0), 216);
    }

    #[test]
    fn refinement_uses_each_voxels_probabilities() {
        // a 2-voxel fragment of class 9 between 3-voxel runs of classes 3 and 4
        let seg = LabelVolume::new([8, 1, 1], vec![3, 3, 3, 9, 9, 4, 4, 4]).unwrap();
        let mut p = FeatureGrid::zeros([1, 14, 1, 1, 8]);
        p.channel_mut(0, 3).copy_from_slice(&[1.0, 1.0, 1.0, 0.2, 0.7, 0.0, 0.0, 0.0]);
        p.channel_mut(0, 4).copy_from_slice(&[0.0, 0.0, 0.0, 0.7, 0.2, 1.0, 1.0, 1.0]);
        // voxel 3 only touches class 3 outside the fragment, voxel 4 only class 4
        let out = nucleus_refine(&seg, &p, 3).unwrap();
        assert_eq!(out.data(), &[3, 3, 3, 3, 4, 4, 4, 4]);
        assert!(nucleus_refine(&seg, &FeatureGrid::zeros([1, 14, 1, 1, 3]), 10).is_err());
    }
}
