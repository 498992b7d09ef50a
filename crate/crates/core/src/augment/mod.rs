//! Training-time spatial and intensity augmentation.
//!
//! A [`SpatialTransform`] is stored as a pull-back map: the output voxel `p`
//! samples the input at `flip(affine(p + elastic(p)))`, which corresponds to
//! applying the flip first, then the affine, then the elastic warp to the
//! image. Images are resampled trilinearly with edge replication, labels by
//! nearest neighbour with background outside the field of view.

mod bspline;

pub use bspline::{elastic_displacement, ControlLattice};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume, BACKGROUND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of a left-right (x axis) flip.
    pub flip_probability: f64,
    /// Per-axis rotation limit, degrees.
    pub rotation_max: f64,
    pub scale_range: [f64; 2],
    /// Per-axis translation limit, voxels.
    pub translation_max: f64,
    pub elastic_control_points: usize,
    /// Per-component limit of control displacements, voxels.
    pub elastic_max_displacement: f64,
    pub log_gamma_range: [f64; 2],
    pub crop_dims: [usize; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            rotation_max: 15.0,
            scale_range: [0.9, 1.1],
            translation_max: 5.0,
            elastic_control_points: 7,
            elastic_max_displacement: 7.0,
            log_gamma_range: [-0.3, 0.3],
            crop_dims: [96, 96, 96],
        }
    }
}

impl AugmentConfig {
    /// No random transformation at all; only the center crop remains.
    pub fn disabled(crop_dims: [usize; 3]) -> Self {
        AugmentConfig {
            flip_probability: 0.0,
            rotation_max: 0.0,
            scale_range: [1.0, 1.0],
            translation_max: 0.0,
            elastic_control_points: 7,
            elastic_max_displacement: 0.0,
            log_gamma_range: [0.0, 0.0],
            crop_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip_probability must lie in [0, 1]"));
        }
        if self.rotation_max < 0.0 || self.translation_max < 0.0 || self.elastic_max_displacement < 0.0 {
            return Err(Error::invalid("augmentation limits must be nonnegative"));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::invalid("scale_range must be positive and ordered"));
        }
        if self.log_gamma_range[0] > self.log_gamma_range[1] {
            return Err(Error::invalid("log_gamma_range must be ordered"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub flip: bool,
    pub rotation_deg: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
    pub elastic: ControlLattice,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform {
            flip: false,
            rotation_deg: [0.0; 3],
            scale: 1.0,
            translation: [0.0; 3],
            elastic: ControlLattice::zeros(0),
        }
    }

    pub fn flip_only() -> Self {
        SpatialTransform {
            flip: true,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && self.rotation_deg == [0.0; 3]
            && self.scale == 1.0
            && self.translation == [0.0; 3]
            && self.elastic.is_zero()
    }

    /// Source position sampled by output voxel `p`.
    pub fn source_point(&self, dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        let d = elastic_displacement(&self.elastic, dims, p);
        let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
        let c = [
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        ];
        let v = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
        let r = rotate(self.rotation_deg, v);
        let mut s = [
            c[0] + self.scale * r[0] + self.translation[0],
            c[1] + self.scale * r[1] + self.translation[1],
            c[2] + self.scale * r[2] + self.translation[2],
        ];
        if self.flip {
            s[0] = (dims[0] as f64 - 1.0) - s[0];
        }
        s
    }
}

/// `Rz * Ry * Rx * v` with angles in degrees.
fn rotate(deg: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    let (sx, cx) = deg[0].to_radians().sin_cos();
    let (sy, cy) = deg[1].to_radians().sin_cos();
    let (sz, cz) = deg[2].to_radians().sin_cos();
    let x1 = [v[0], cx * v[1] - sx * v[2], sx * v[1] + cx * v[2]];
    let x2 = [cy * x1[0] + sy * x1[2], x1[1], -sy * x1[0] + cy * x1[2]];
    [cz * x2[0] - sz * x2[1], sz * x2[0] + cz * x2[1], x2[2]]
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, limit: f64) -> f64 {
    rng.random_range(-limit..=limit)
}

/// Draw a random transform. Draw order is fixed: flip, rotations (x, y, z),
/// scale, translations (x, y, z), then the control lattice.
pub fn sample_transform<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> SpatialTransform {
    let flip = rng.random_bool(cfg.flip_probability);
    let rotation_deg = [
        symmetric(rng, cfg.rotation_max),
        symmetric(rng, cfg.rotation_max),
        symmetric(rng, cfg.rotation_max),
    ];
    let scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let translation = [
        symmetric(rng, cfg.translation_max),
        symmetric(rng, cfg.translation_max),
        symmetric(rng, cfg.translation_max),
    ];
    let n = cfg.elastic_control_points;
    let displacements = (0..n.pow(3))
        .map(|_| {
            [
                symmetric(rng, cfg.elastic_max_displacement),
                symmetric(rng, cfg.elastic_max_displacement),
                symmetric(rng, cfg.elastic_max_displacement),
            ]
        })
        .collect();
    SpatialTransform {
        flip,
        rotation_deg,
        scale,
        translation,
        elastic: ControlLattice {
            points_per_axis: n,
            displacements,
        },
    }
}

fn trilinear(v: &ScalarVolume, s: [f64; 3]) -> f64 {
    let dims = v.dims();
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = s[a].clamp(0.0, hi);
        let f = x.floor().min((dims[a].max(2) - 2) as f64);
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        t[a] = x - f;
    }
    let g = |x: usize, y: usize, z: usize| v.get(x, y, z);
    let lerp = |a: f64, b: f64, t: f64| {
        if t == 0.0 {
            a
        } else if t == 1.0 {
            b
        } else {
            a + t * (b - a)
        }
    };
    let c00 = lerp(g(i0[0], i0[1], i0[2]), g(i1[0], i0[1], i0[2]), t[0]);
    let c10 = lerp(g(i0[0], i1[1], i0[2]), g(i1[0], i1[1], i0[2]), t[0]);
    let c01 = lerp(g(i0[0], i0[1], i1[2]), g(i1[0], i0[1], i1[2]), t[0]);
    let c11 = lerp(g(i0[0], i1[1], i1[2]), g(i1[0], i1[1], i1[2]), t[0]);
    let c0 = lerp(c00, c10, t[1]);
    let c1 = lerp(c01, c11, t[1]);
    lerp(c0, c1, t[2])
}

fn nearest(l: &LabelVolume, s: [f64; 3]) -> u8 {
    let dims = l.dims();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (s[a] + 0.5).floor();
        if r < 0.0 || r >= dims[a] as f64 {
            return BACKGROUND;
        }
        idx[a] = r as usize;
    }
    l.get(idx[0], idx[1], idx[2])
}

/// Resample an image/label pair through the same transform.
pub fn apply_transform(
    image: &ScalarVolume,
    labels: &LabelVolume,
    t: &SpatialTransform,
) -> Result<(ScalarVolume, LabelVolume)> {
    image.same_dims(labels)?;
    if t.is_identity() {
        return Ok((image.clone(), labels.clone()));
    }
    let dims = image.dims();
    let mut img = Vec::with_capacity(image.len());
    let mut lab = Vec::with_capacity(image.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let s = t.source_point(dims, [x as f64, y as f64, z as f64]);
                img.push(trilinear(image, s));
                lab.push(nearest(labels, s));
            }
        }
    }
    Ok((image.same_grid(img), labels.same_grid(lab)))
}

/// Min-max normalize, raise to `exp(log_gamma)`, and map back to the
/// original range. Constant images are returned unchanged.
pub fn gamma_augment(image: &ScalarVolume, log_gamma: f64) -> ScalarVolume {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || log_gamma == 0.0 {
        return image.clone();
    }
    let gamma = log_gamma.exp();
    image.map(|v| lo + range * ((v - lo) / range).powf(gamma))
}

/// Full training-time augmentation of one pair: spatial transform, gamma on
/// the image, then the center crop.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &ScalarVolume,
    labels: &LabelVolume,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(ScalarVolume, LabelVolume)> {
    let t = sample_transform(cfg, rng);
    let log_gamma = rng.random_range(cfg.log_gamma_range[0]..=cfg.log_gamma_range[1]);
    let (img, lab) = apply_transform(image, labels, &t)?;
    let img = gamma_augment(&img, log_gamma);
    Ok((img.crop_center(cfg.crop_dims)?, lab.crop_center(cfg.crop_dims)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::is_valid_code;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(dims: [usize; 3]) -> (ScalarVolume, LabelVolume) {
        let n: usize = dims.iter().product();
        let img = ScalarVolume::new(dims, (0..n).map(|i| ((i * 37) % 101) as f64 * 0.1).collect()).unwrap();
        let codes = [0u8, 1, 2, 5, 13, 100];
        let lab = LabelVolume::new(dims, (0..n).map(|i| codes[(i / 7) % codes.len()]).collect()).unwrap();
        (img, lab)
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_transform(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_transform(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.rotation_deg.iter().all(|r| r.abs() <= 15.0));
        assert!((0.9..=1.1).contains(&a.scale));
        assert_eq!(a.elastic.displacements.len(), 343);
    }

    #[test]
    fn zero_config_is_identity() {
        let cfg = AugmentConfig::disabled([8, 8, 8]);
        let t = sample_transform(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.is_identity());
        let (img, lab) = pair([10, 9, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ai, al) = augment_pair(&img, &lab, &cfg, &mut rng).unwrap();
        assert_eq!(ai, img.crop_center([8, 8, 8]).unwrap());
        assert_eq!(al, lab.crop_center([8, 8, 8]).unwrap());
    }

    #[test]
    fn flip_rate_is_half() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let flips = (0..10_000).filter(|_| rng.random_bool(cfg.flip_probability)).count();
        // sample_transform draws the flip first; check through the public API as well
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let cheap = AugmentConfig {
            elastic_control_points: 0,
            ..AugmentConfig::default()
        };
        let via_api = (0..10_000).filter(|_| sample_transform(&cheap, &mut rng).flip).count();
        for f in [flips, via_api] {
            let rate = f as f64 / 10_000.0;
            assert!((rate - 0.5).abs() <= 0.02, "{rate}");
        }
    }

    #[test]
    fn identity_and_double_flip() {
        let (img, lab) = pair([6, 5, 4]);
        let (a, b) = apply_transform(&img, &lab, &SpatialTransform::identity()).unwrap();
        assert_eq!((&a, &b), (&img, &lab));
        // force the general resampling path for an identity-valued transform
        let mut t = SpatialTransform::identity();
        t.elastic = ControlLattice::zeros(7);
        t.rotation_deg = [0.0, -0.0, 0.0];
        let mut near_id = t.clone();
        near_id.flip = true;
        let (f1, l1) = apply_transform(&img, &lab, &near_id).unwrap();
        assert_ne!(f1, img);
        let (f2, l2) = apply_transform(&f1, &l1, &near_id).unwrap();
        assert_eq!((f2, l2), (img, lab));
    }

    #[test]
    fn labels_stay_in_code_set() {
        let (img, lab) = pair([16, 16, 16]);
        let cfg = AugmentConfig {
            crop_dims: [12, 12, 12],
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let (_, l) = augment_pair(&img, &lab, &cfg, &mut rng).unwrap();
            assert!(l.data().iter().all(|&c| is_valid_code(c)));
            let before: std::collections::BTreeSet<u8> = lab.data().iter().copied().collect();
            assert!(l.data().iter().all(|c| before.contains(c) || *c == 0));
        }
    }

    #[test]
    fn impulse_stays_aligned() {
        let dims = [20, 20, 20];
        let mut img = ScalarVolume::filled(dims, 0.0);
        let mut lab = LabelVolume::filled(dims, 0);
        img.set(9, 11, 10, 1.0);
        lab.set(9, 11, 10, 7);
        let cfg = AugmentConfig {
            elastic_max_displacement: 2.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let t = sample_transform(&cfg, &mut rng);
            let (ti, tl) = apply_transform(&img, &lab, &t).unwrap();
            for i in 0..tl.len() {
                if tl.data()[i] == 7 {
                    // the nearest-neighbour hit must lie inside the trilinear support
                    assert!(ti.data()[i] > 0.0, "label voxel without image support");
                }
            }
        }
    }

    #[test]
    fn gamma_cases() {
        let v = ScalarVolume::new([5, 1, 1], vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let same = gamma_augment(&v, 0.0);
        assert_eq!(same, v);
        let g = gamma_augment(&v, 0.3);
        assert!((g.data()[2] - 0.5f64.powf(0.3f64.exp())).abs() < 1e-12);
        assert!((g.data()[2] - 0.3923).abs() < 1e-4);
        assert!(g.data().windows(2).all(|w| w[0] < w[1]));
        let c = ScalarVolume::filled([3, 1, 1], 2.0);
        assert_eq!(gamma_augment(&c, 0.3), c);
        // range preserved on a T1-like scale
        let t1 = v.map(|x| 800.0 + 1000.0 * x);
        let g = gamma_augment(&t1, -0.2);
        assert_eq!(g.data()[0], 800.0);
        assert!((g.data()[4] - 1800.0).abs() < 1e-9);
    }
}
