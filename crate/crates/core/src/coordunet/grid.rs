use crate::error::{Error, Result};

/// Rank-5 array `(batch, channels, depth, height, width)`, width fastest.
///
/// The spatial order matches [`crate::Volume`]: depth is z, height is y and
/// width is x.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(shape: [usize; 5]) -> Self {
        FeatureGrid {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(FeatureGrid { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `(depth, height, width)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous values of one `(batch, channel)` instance.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &FeatureGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Stack along the channel axis.
    pub fn concat_channels(a: &FeatureGrid, b: &FeatureGrid) -> Result<FeatureGrid> {
        if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let [n, ca, d, h, w] = a.shape;
        let cb = b.shape[1];
        let v = d * h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * v);
        for bi in 0..n {
            data.extend_from_slice(&a.data[bi * ca * v..(bi + 1) * ca * v]);
            data.extend_from_slice(&b.data[bi * cb * v..(bi + 1) * cb * v]);
        }
        Ok(FeatureGrid {
            shape: [n, ca + cb, d, h, w],
            data,
        })
    }

    /// Inverse of [`FeatureGrid::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> (FeatureGrid, FeatureGrid) {
        let [n, c, d, h, w] = self.shape;
        let cb = c - ca;
        let v = d * h * w;
        let mut a = Vec::with_capacity(n * ca * v);
        let mut b = Vec::with_capacity(n * cb * v);
        for bi in 0..n {
            let base = bi * c * v;
            a.extend_from_slice(&self.data[base..base + ca * v]);
            b.extend_from_slice(&self.data[base + ca * v..base + c * v]);
        }
        (
            FeatureGrid {
                shape: [n, ca, d, h, w],
                data: a,
            },
            FeatureGrid {
                shape: [n, cb, d, h, w],
                data: b,
            },
        )
    }

    pub fn add_assign(&mut self, other: &FeatureGrid) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
