//! Digital phantoms with known T1/PD maps and nucleus labels.
//!
//! A phantom is a cube with a background shell, a white-matter plateau
//! filling the brain, and ellipsoidal nuclei coded 1..13 with their own
//! relaxation parameters. An optional rind of unlabeled voxels around the
//! nuclei mimics sparse manual annotation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irsignal::{ir_signal, AcquisitionParams, Polarity, TissueParams};
use crate::volume::{LabelVolume, ScalarVolume, BACKGROUND, UNLABELED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub code: u8,
    /// Voxel coordinates `[x, y, z]`.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub t1: f64,
    pub pd: f64,
}

impl RegionSpec {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Thickness of the background shell around the brain, voxels.
    pub shell: usize,
    pub wm_t1: f64,
    pub wm_pd: f64,
    pub nuclei: Vec<RegionSpec>,
    /// Thickness of the unlabeled rind around the nuclei, voxels.
    pub rind: usize,
    /// Relative standard deviation of a multiplicative T1 texture inside
    /// the brain; 0 gives piecewise-constant maps.
    pub t1_texture: f64,
}

impl Default for PhantomSpec {
    /// 32³ cube, 2-voxel shell, 13 spheres of radius 3.5 on a 7-voxel
    /// lattice and a 1-voxel rind.
    fn default() -> Self {
        let mut nuclei = Vec::with_capacity(13);
        let xy = [9.0, 16.0, 23.0];
        'place: for z in [12.0, 19.0] {
            for y in xy {
                for x in xy {
                    if nuclei.len() == 13 {
                        break 'place;
                    }
                    let k = nuclei.len() as f64;
                    nuclei.push(RegionSpec {
                        code: nuclei.len() as u8 + 1,
                        center: [x, y, z],
                        radii: [3.5; 3],
                        t1: 1000.0 + 50.0 * k,
                        pd: 0.5 + 0.125 * k,
                    });
                }
            }
        }
        PhantomSpec {
            dims: [32; 3],
            spacing: [1.0; 3],
            shell: 2,
            wm_t1: 850.0,
            wm_pd: 1.0,
            nuclei,
            rind: 1,
            t1_texture: 0.0,
        }
    }
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n <= 2 * self.shell) {
            return Err(Error::invalid(format!(
                "dims {:?} leave no brain inside a {}-voxel shell",
                self.dims, self.shell
            )));
        }
        let tissue_ok = |t1: f64, pd: f64| (600.0..=2000.0).contains(&t1) && (0.5..=2.0).contains(&pd);
        if !tissue_ok(self.wm_t1, self.wm_pd) {
            return Err(Error::invalid("white matter T1 must lie in [600, 2000] ms and PD in [0.5, 2]"));
        }
        if self.nuclei.is_empty() {
            return Err(Error::invalid("phantom needs at least one nucleus"));
        }
        let mut seen = [false; 14];
        for r in &self.nuclei {
            if !(1..=13).contains(&r.code) {
                return Err(Error::invalid(format!("nucleus code {} outside 1..13", r.code)));
            }
            if std::mem::replace(&mut seen[r.code as usize], true) {
                return Err(Error::invalid(format!("nucleus code {} defined twice", r.code)));
            }
            if !tissue_ok(r.t1, r.pd) {
                return Err(Error::invalid(format!(
                    "nucleus {}: T1 must lie in [600, 2000] ms and PD in [0.5, 2]",
                    r.code
                )));
            }
            if r.radii.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::invalid(format!("nucleus {} has nonpositive radii", r.code)));
            }
        }
        if !(self.t1_texture >= 0.0 && self.t1_texture < 0.5) {
            return Err(Error::invalid("t1_texture must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t1: ScalarVolume,
    pub pd: ScalarVolume,
    pub labels: LabelVolume,
    pub brain_mask: LabelVolume,
}

/// Rasterize `spec`. The seed only matters when `t1_texture` is positive.
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let geometry = |data| ScalarVolume::with_geometry(dims, spec.spacing, [0.0; 3], data);
    let mut t1 = vec![0.0; n];
    let mut pd = vec![0.0; n];
    let mut labels = vec![BACKGROUND; n];
    let mut brain = vec![0u8; n];
    let mut owner: Vec<Option<u8>> = vec![None; n];
    let s = spec.shell;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + dims[0] * (y + dims[1] * z);
                let inside = [x, y, z].iter().zip(&dims).all(|(&c, &d)| c >= s && c < d - s);
                if inside {
                    brain[i] = 1;
                    t1[i] = spec.wm_t1;
                    pd[i] = spec.wm_pd;
                }
                for r in &spec.nuclei {
                    if !r.contains([x, y, z]) {
                        continue;
                    }
                    if let Some(other) = owner[i] {
                        return Err(Error::invalid(format!(
                            "nuclei {other} and {} overlap at voxel ({x}, {y}, {z})",
                            r.code
                        )));
                    }
                    if !inside {
                        return Err(Error::invalid(format!(
                            "nucleus {} reaches outside the brain at ({x}, {y}, {z})",
                            r.code
                        )));
                    }
                    owner[i] = Some(r.code);
                    labels[i] = r.code;
                    t1[i] = r.t1;
                    pd[i] = r.pd;
                }
            }
        }
    }
    add_rind(&mut labels, &brain, dims, spec.rind);
    if spec.t1_texture > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spec.t1_texture).expect("finite sigma");
        for (v, &b) in t1.iter_mut().zip(&brain) {
            if b != 0 {
                *v *= (1.0 + noise.sample(&mut rng)).max(0.5);
            }
        }
    }
    let labels = LabelVolume::with_geometry(dims, spec.spacing, [0.0; 3], labels)?;
    let brain_mask = labels.same_grid(brain);
    Ok(Phantom {
        t1: geometry(t1)?,
        pd: geometry(pd)?,
        labels,
        brain_mask,
    })
}

/// Mark brain voxels within `thickness` face steps of a nucleus as unlabeled.
fn add_rind(labels: &mut [u8], brain: &[u8], dims: [usize; 3], thickness: usize) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut frontier: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != BACKGROUND).collect();
    for _ in 0..thickness {
        let mut next = Vec::new();
        for &i in &frontier {
            for a in 0..3 {
                let pos = (i / strides[a]) % dims[a];
                for (ok, j) in [(pos > 0, i.wrapping_sub(strides[a])), (pos + 1 < dims[a], i + strides[a])] {
                    if ok && labels[j] == BACKGROUND && brain[j] != 0 {
                        labels[j] = UNLABELED;
                        next.push(j);
                    }
                }
            }
        }
        frontier = next;
    }
}

/// Simulated acquisition: the model signal of every voxel plus Gaussian
/// noise; magnitude mode takes the absolute value after adding noise.
pub fn acquire(
    phantom: &Phantom,
    acq: AcquisitionParams,
    sigma: f64,
    polarity: Polarity,
    seed: u64,
) -> Result<ScalarVolume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be finite and nonnegative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let data = phantom
        .t1
        .data()
        .iter()
        .zip(phantom.pd.data())
        .map(|(&t1, &pd)| {
            let mut v = ir_signal(TissueParams { t1, pd }, acq);
            if sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            match polarity {
                Polarity::Signed => v,
                Polarity::Magnitude => v.abs(),
            }
        })
        .collect();
    Ok(phantom.t1.same_grid(data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_phantom_has_every_code() {
        let p = make_phantom(&PhantomSpec::default(), 0).unwrap();
        for c in 0..=13 {
            assert!(p.labels.count(c) > 0, "code {c}");
        }
        assert!(p.labels.count(UNLABELED) > 0);
        p.labels.validate_codes().unwrap();
        // brain is the cube minus a 2-voxel shell
        assert_eq!(p.brain_mask.count(1), 28 * 28 * 28);
    }

    #[test]
    fn region_volumes_match_lattice_counts() {
        let spec = PhantomSpec::default();
        let p = make_phantom(&spec, 0).unwrap();
        // lattice points of a radius-3.5 ball: enumerate offsets directly
        let mut ball = 0;
        for dz in -4i32..=4 {
            for dy in -4i32..=4 {
                for dx in -4i32..=4 {
                    if (dx * dx + dy * dy + dz * dz) as f64 <= 12.25 {
                        ball += 1;
                    }
                }
            }
        }
        assert_eq!(ball, 179);
        for c in 1..=13 {
            assert_eq!(p.labels.count(c), ball);
        }
    }

    #[test]
    fn zero_rind_has_no_sentinel() {
        let spec = PhantomSpec {
            rind: 0,
            ..PhantomSpec::default()
        };
        assert_eq!(make_phantom(&spec, 0).unwrap().labels.count(UNLABELED), 0);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let mut spec = PhantomSpec::default();
        spec.nuclei[1].center = spec.nuclei[0].center;
        assert!(make_phantom(&spec, 0).is_err());
        let mut spec = PhantomSpec::default();
        spec.nuclei[0].t1 = 300.0;
        assert!(make_phantom(&spec, 0).is_err());
        let spec = PhantomSpec {
            nuclei: vec![],
            ..PhantomSpec::default()
        };
        assert!(make_phantom(&spec, 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(PhantomSpec::from_json(&text).unwrap(), spec);
        let partial = PhantomSpec::from_json(r#"{"rind": 0}"#).unwrap();
        assert_eq!(partial.nuclei.len(), 13);
    }

    #[test]
    fn noiseless_acquisition_is_the_model() {
        let p = make_phantom(&PhantomSpec::default(), 0).unwrap();
        let m = acquire(&p, AcquisitionParams::mprage(), 0.0, Polarity::Signed, 1).unwrap();
        for i in 0..m.len() {
            let t = TissueParams {
                t1: p.t1.data()[i],
                pd: p.pd.data()[i],
            };
            assert_eq!(m.data()[i], ir_signal(t, AcquisitionParams::mprage()));
        }
        let f = acquire(&p, AcquisitionParams::fgatir(), 0.0, Polarity::Magnitude, 1).unwrap();
        assert!(f.data().iter().all(|&v| v >= 0.0));
        let signed = acquire(&p, AcquisitionParams::fgatir(), 0.0, Polarity::Signed, 1).unwrap();
        for (&s, &b) in signed.data().iter().zip(p.brain_mask.data()) {
            if b != 0 {
                assert!(s < 0.0);
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let p = make_phantom(&PhantomSpec::default(), 0).unwrap();
        let a = acquire(&p, AcquisitionParams::mprage(), 0.01, Polarity::Magnitude, 9).unwrap();
        let b = acquire(&p, AcquisitionParams::mprage(), 0.01, Polarity::Magnitude, 9).unwrap();
        let c = acquire(&p, AcquisitionParams::mprage(), 0.01, Polarity::Magnitude, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(acquire(&p, AcquisitionParams::mprage(), -1.0, Polarity::Signed, 0).is_err());
    }

    #[test]
    fn texture_depends_on_seed() {
        let spec = PhantomSpec {
            t1_texture: 0.05,
            ..PhantomSpec::default()
        };
        let a = make_phantom(&spec, 1).unwrap();
        assert_eq!(a, make_phantom(&spec, 1).unwrap());
        assert_ne!(a.t1, make_phantom(&spec, 2).unwrap().t1);
    }
}
