//! Joint bias harmonization and white-matter mean normalization.
//!
//! Both images are divided by the same harmonized field and the same
//! white-matter mean, so their voxelwise ratio, which carries the T1
//! information, is untouched.

mod bias;
mod fcm;

pub use bias::{
    apply_bias_correction, estimate_bias, harmonize_bias, BiasField, DEFAULT_SIGMA,
};
pub use fcm::{fcm_cluster, fcm_objective, FcmConfig, FcmResult};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

/// Binary white-matter mask: voxels of `brain_mask` whose strongest fuzzy
/// membership belongs to the brightest MPRAGE cluster.
pub fn wm_mask_from_mprage(
    mprage: &ScalarVolume,
    brain_mask: &LabelVolume,
    cfg: &FcmConfig,
) -> Result<LabelVolume> {
    mprage.same_dims(brain_mask)?;
    let idx: Vec<usize> = (0..brain_mask.len())
        .filter(|&i| brain_mask.data()[i] != 0)
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("brain mask is empty"));
    }
    let values: Vec<f64> = idx.iter().map(|&i| mprage.data()[i]).collect();
    let fit = fcm_cluster(&values, cfg)?;
    let top = fit.centroids.len() - 1;
    let mut out = vec![0u8; mprage.len()];
    for (k, &i) in idx.iter().enumerate() {
        if fit.hard_assignment(k) == top {
            out[i] = 1;
        }
    }
    Ok(mprage.same_grid(out))
}

/// Divide both images by the mean MPRAGE intensity inside `wm_mask`.
pub fn wm_normalize(
    mprage: &ScalarVolume,
    fgatir: &ScalarVolume,
    wm_mask: &LabelVolume,
) -> Result<(ScalarVolume, ScalarVolume, f64)> {
    mprage.same_dims(fgatir)?;
    mprage.same_dims(wm_mask)?;
    let (sum, n) = mprage
        .data()
        .iter()
        .zip(wm_mask.data())
        .filter(|(_, &m)| m != 0)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::invalid("white-matter mask is empty"));
    }
    let mu = sum / n as f64;
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("white-matter mean {mu} is not positive")));
    }
    Ok((mprage.map(|v| v / mu), fgatir.map(|v| v / mu), mu))
}
