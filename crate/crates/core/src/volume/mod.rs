//! Volumetric grids and their file formats.
//!
//! Voxel data is stored row-major with x fastest and z slowest, i.e. the
//! linear index of `(x, y, z)` is `x + nx * (y + ny * z)`.

mod io;
mod schema;

pub use io::{decode, encode, read_volume, write_volume, AnyVolume, DataType, Format};
pub use schema::{LabelSchema, Nucleus, BACKGROUND, UNLABELED};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<T>,
}

/// Real-valued intensities.
pub type ScalarVolume = Volume<f64>;

/// Integer label codes: 0 background, 1-13 nuclei, 100 unlabeled.
pub type LabelVolume = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        Self::with_geometry(dims, [1.0; 3], [0.0; 3], data)
    }

    pub fn with_geometry(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        data: Vec<T>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        let n = dims.iter().product();
        Volume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![value; n],
        }
    }

    /// A volume on the same grid as `self` holding `data`.
    pub fn same_grid<U: Copy>(&self, data: Vec<U>) -> Volume<U> {
        assert_eq!(data.len(), self.data.len(), "data length must match grid");
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data,
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        self.same_grid(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn same_dims<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    /// Extract a centered sub-volume. When `dims - target` is odd along an
    /// axis, the extra voxel is dropped on the high-index side.
    pub fn crop_center(&self, target: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if target[a] > self.dims[a] || target[a] == 0 {
                return Err(Error::invalid(format!(
                    "crop target {target:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let start = center_offsets(self.dims, target);
        let mut data = Vec::with_capacity(target.iter().product());
        for z in 0..target[2] {
            for y in 0..target[1] {
                let row = self.index(start[0], y + start[1], z + start[2]);
                data.extend_from_slice(&self.data[row..row + target[0]]);
            }
        }
        Ok(Volume {
            dims: target,
            spacing: self.spacing,
            origin: shifted_origin(self.origin, self.spacing, start, 1.0),
            data,
        })
    }

    /// Embed the volume centered in a larger grid filled with `fill`; the
    /// exact inverse placement of [`Volume::crop_center`].
    pub fn pad_to(&self, target: [usize; 3], fill: T) -> Result<Self> {
        for a in 0..3 {
            if target[a] < self.dims[a] {
                return Err(Error::invalid(format!(
                    "pad target {target:?} smaller than dims {:?}",
                    self.dims
                )));
            }
        }
        let start = center_offsets(target, self.dims);
        let mut out = Volume {
            dims: target,
            spacing: self.spacing,
            origin: shifted_origin(self.origin, self.spacing, start, -1.0),
            data: vec![fill; target.iter().product()],
        };
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                let src = self.index(0, y, z);
                let dst = out.index(start[0], y + start[1], z + start[2]);
                out.data[dst..dst + self.dims[0]]
                    .copy_from_slice(&self.data[src..src + self.dims[0]]);
            }
        }
        Ok(out)
    }
}

impl ScalarVolume {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl LabelVolume {
    /// Check every code is background, a nucleus code 1-13, or the sentinel.
    pub fn validate_codes(&self) -> Result<()> {
        match self.data.iter().position(|&c| !is_valid_code(c)) {
            Some(i) => Err(Error::LabelOutOfRange {
                code: self.data[i] as u32,
                offset: i,
            }),
            None => Ok(()),
        }
    }

    pub fn count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&c| c == code).count()
    }
}

#[inline]
pub fn is_valid_code(c: u8) -> bool {
    c <= 13 || c == UNLABELED
}

fn center_offsets(outer: [usize; 3], inner: [usize; 3]) -> [usize; 3] {
    [
        (outer[0] - inner[0]) / 2,
        (outer[1] - inner[1]) / 2,
        (outer[2] - inner[2]) / 2,
    ]
}

fn shifted_origin(origin: [f32; 3], spacing: [f32; 3], offset: [usize; 3], sign: f32) -> [f32; 3] {
    let mut o = origin;
    for a in 0..3 {
        o[a] += sign * offset[a] as f32 * spacing[a];
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> ScalarVolume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn crop_symmetric_keeps_middle() {
        let v = ramp([5, 5, 5]);
        let c = v.crop_center([3, 3, 3]).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
        assert_eq!(c.get(2, 2, 2), v.get(3, 3, 3));
    }

    #[test]
    fn crop_odd_remainder_drops_high_side() {
        let v = ramp([4, 4, 4]);
        let c = v.crop_center([3, 3, 3]).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(0, 0, 0));
        assert_eq!(c.get(2, 2, 2), v.get(2, 2, 2));
    }

    #[test]
    fn crop_identity_and_errors() {
        let v = ramp([4, 3, 2]);
        assert_eq!(v.crop_center([4, 3, 2]).unwrap(), v);
        assert!(v.crop_center([5, 3, 2]).is_err());
        assert!(v.pad_to([3, 3, 2], 0.0).is_err());
    }

    #[test]
    fn pad_then_crop_restores() {
        let v = ramp([3, 3, 3]);
        let p = v.pad_to([5, 5, 5], 0.0).unwrap();
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.crop_center([3, 3, 3]).unwrap(), v);
        // odd difference
        let p = v.pad_to([4, 6, 5], -1.0).unwrap();
        assert_eq!(p.get(0, 1, 1), v.get(0, 0, 0));
        assert_eq!(p.crop_center([3, 3, 3]).unwrap(), v);
    }

    #[test]
    fn label_pad_uses_background() {
        let l = LabelVolume::filled([2, 2, 2], 5);
        let p = l.pad_to([4, 4, 4], BACKGROUND).unwrap();
        assert_eq!(p.count(0), 64 - 8);
        assert_eq!(p.count(5), 8);
    }

    #[test]
    fn invalid_codes_detected() {
        let mut l = LabelVolume::filled([2, 1, 1], 100);
        assert!(l.validate_codes().is_ok());
        l.data_mut()[1] = 14;
        match l.validate_codes() {
            Err(Error::LabelOutOfRange { code: 14, offset: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn data_length_checked() {
        assert!(ScalarVolume::new([2, 2, 2], vec![0.0; 7]).is_err());
    }
}
