use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

pub const DEFAULT_SIGMA: f64 = 20.0;

/// Strictly positive multiplicative gain field.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField(ScalarVolume);

impl BiasField {
    pub fn new(v: ScalarVolume) -> Result<Self> {
        if let Some(i) = v.data().iter().position(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::invalid(format!(
                "bias field must be strictly positive; voxel {i} holds {}",
                v.data()[i]
            )));
        }
        Ok(BiasField(v))
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.0
    }

    pub fn into_volume(self) -> ScalarVolume {
        self.0
    }
}

/// Smooth multiplicative field: the Gaussian-smoothed log intensity,
/// exponentiated and rescaled to unit geometric mean inside the mask.
///
/// Smoothing is a normalized convolution restricted to the mask, so voxels
/// outside the mask neither contribute nor need to be positive.
pub fn estimate_bias(v: &ScalarVolume, mask: Option<&LabelVolume>, sigma: f64) -> Result<BiasField> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("smoothing sigma must be positive"));
    }
    let inside: Vec<bool> = match mask {
        Some(m) => {
            v.same_dims(m)?;
            m.data().iter().map(|&c| c != 0).collect()
        }
        None => vec![true; v.len()],
    };
    let count = inside.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::invalid("bias estimation mask is empty"));
    }
    let mut log = vec![0.0; v.len()];
    let mut weight = vec![0.0; v.len()];
    for i in 0..v.len() {
        if inside[i] {
            let x = v.data()[i];
            if !(x > 0.0) {
                return Err(Error::invalid(format!(
                    "nonpositive intensity {x} inside mask at voxel {i}"
                )));
            }
            log[i] = x.ln();
            weight[i] = 1.0;
        }
    }
    let num = gaussian_smooth(&log, v.dims(), sigma);
    let den = gaussian_smooth(&weight, v.dims(), sigma);
    let mut smooth: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| if d > 1e-12 { n / d } else { f64::NAN })
        .collect();
    let mean_log = (0..v.len())
        .filter(|&i| inside[i])
        .map(|i| smooth[i])
        .sum::<f64>()
        / count as f64;
    for s in &mut smooth {
        // Voxels beyond the kernel's reach get unit gain.
        *s = if s.is_nan() { 1.0 } else { (*s - mean_log).exp() };
    }
    BiasField::new(v.same_grid(smooth))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable truncated Gaussian with zero extension outside the grid.
fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let lo = (-radius).max(-pos);
            let hi = radius.min(n - 1 - pos);
            let mut acc = 0.0;
            for k in lo..=hi {
                let j = (i as isize + k * stride as isize) as usize;
                acc += kernel[(k + radius) as usize] * cur[j];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Voxelwise geometric mean of two fields.
pub fn harmonize_bias(b_m: &BiasField, b_f: &BiasField) -> Result<BiasField> {
    b_m.0.same_dims(&b_f.0)?;
    let data = b_m
        .0
        .data()
        .iter()
        .zip(b_f.0.data())
        .map(|(a, b)| (a * b).sqrt())
        .collect();
    BiasField::new(b_m.0.same_grid(data))
}

/// Divide both images by the same field.
pub fn apply_bias_correction(
    mprage: &ScalarVolume,
    fgatir: &ScalarVolume,
    b_harm: &BiasField,
) -> Result<(ScalarVolume, ScalarVolume)> {
    mprage.same_dims(fgatir)?;
    mprage.same_dims(&b_harm.0)?;
    let divide = |img: &ScalarVolume| {
        img.same_grid(
            img.data()
                .iter()
                .zip(b_harm.0.data())
                .map(|(v, b)| v / b)
                .collect(),
        )
    };
    Ok((divide(mprage), divide(fgatir)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(values: Vec<f64>) -> BiasField {
        let n = values.len();
        BiasField::new(ScalarVolume::new([n, 1, 1], values).unwrap()).unwrap()
    }

    #[test]
    fn constant_image_has_unit_field() {
        let v = ScalarVolume::filled([8, 8, 8], 3.0);
        let b = estimate_bias(&v, None, 4.0).unwrap();
        assert!(b.volume().data().iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn nonpositive_inside_mask_rejected() {
        let mut v = ScalarVolume::filled([4, 4, 4], 1.0);
        v.data_mut()[5] = 0.0;
        assert!(estimate_bias(&v, None, 2.0).is_err());
        let mut mask = LabelVolume::filled([4, 4, 4], 1);
        mask.data_mut()[5] = 0;
        assert!(estimate_bias(&v, Some(&mask), 2.0).is_ok());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn recovers_planted_gain() {
        let n = 32;
        let dims = [n, n, n];
        let mut clean = ScalarVolume::filled(dims, 0.0);
        let mut gain = ScalarVolume::filled(dims, 0.0);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    // three interleaved tissue classes in 4-voxel blocks
                    let level = [0.6, 1.0, 0.8][(x / 4 + y / 4 + z / 4) % 3];
                    clean.set(x, y, z, level);
                    let (u, v, w) = (x as f64 / n as f64, y as f64 / n as f64, z as f64 / n as f64);
                    gain.set(x, y, z, (0.4 * (u - 0.5) + 0.2 * (v - 0.5) - 0.25 * (w - 0.5)).exp());
                }
            }
        }
        let gm = (gain.data().iter().map(|g| g.ln()).sum::<f64>() / gain.len() as f64).exp();
        let gain = gain.map(|g| g / gm);
        let img = clean.same_grid(clean.data().iter().zip(gain.data()).map(|(a, b)| a * b).collect());
        let b = estimate_bias(&img, None, DEFAULT_SIGMA).unwrap();
        let r = pearson(b.volume().data(), gain.data());
        assert!(r > 0.99, "pearson {r}");
        let log_mean = b.volume().data().iter().map(|g| g.ln()).sum::<f64>() / b.volume().len() as f64;
        assert!(log_mean.exp() - 1.0 < 1e-6);
    }

    #[test]
    fn harmonize_hand_cases() {
        let h = harmonize_bias(&field(vec![4.0, 2.0]), &field(vec![1.0, 2.0])).unwrap();
        assert_eq!(h.volume().data(), &[2.0, 2.0]);
    }

    #[test]
    fn correction_identity_and_halving() {
        let m = ScalarVolume::new([2, 1, 1], vec![3.0, -1.0]).unwrap();
        let f = ScalarVolume::new([2, 1, 1], vec![-2.0, 5.0]).unwrap();
        let (a, b) = apply_bias_correction(&m, &f, &field(vec![1.0, 1.0])).unwrap();
        assert_eq!((a, b), (m.clone(), f.clone()));
        let (a, b) = apply_bias_correction(&m, &f, &field(vec![2.0, 2.0])).unwrap();
        assert_eq!(a.data(), &[1.5, -0.5]);
        assert_eq!(b.data(), &[-1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn harmonized_field_is_between_and_symmetric(
            a in proptest::collection::vec(1e-3f64..1e3, 1..32),
            seed in proptest::collection::vec(1e-3f64..1e3, 32),
        ) {
            let b: Vec<f64> = seed[..a.len()].to_vec();
            let fa = field(a.clone());
            let fb = field(b.clone());
            let h1 = harmonize_bias(&fa, &fb).unwrap();
            let h2 = harmonize_bias(&fb, &fa).unwrap();
            prop_assert_eq!(&h1, &h2);
            for i in 0..a.len() {
                let h = h1.volume().data()[i];
                prop_assert!(h >= a[i].min(b[i]) && h <= a[i].max(b[i]));
            }
        }

        #[test]
        fn correction_preserves_ratio(
            m in proptest::collection::vec(-5.0f64..5.0, 16),
            f in proptest::collection::vec(0.01f64..5.0, 16),
            g in proptest::collection::vec(0.1f64..10.0, 16),
        ) {
            let mv = ScalarVolume::new([16, 1, 1], m.clone()).unwrap();
            let fv = ScalarVolume::new([16, 1, 1], f.clone()).unwrap();
            let (a, b) = apply_bias_correction(&mv, &fv, &field(g)).unwrap();
            for i in 0..16 {
                let before = m[i] / f[i];
                let after = a.data()[i] / b.data()[i];
                prop_assert!((after - before).abs() <= 1e-12 * before.abs().max(1e-300));
            }
        }
    }
}
