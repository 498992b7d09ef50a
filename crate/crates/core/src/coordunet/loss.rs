use super::grid::FeatureGrid;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, UNLABELED};

/// Mean class-wise soft Dice loss over labeled voxels only.
///
/// `pred` holds post-softmax probabilities of shape `(1, C, nz, ny, nx)`;
/// `labels` has dims `[nx, ny, nz]`. Voxels coded [`UNLABELED`] are skipped
/// entirely and receive an exactly zero gradient. Returns the loss and its
/// gradient with respect to `pred`.
pub fn masked_dice_loss(pred: &FeatureGrid, labels: &LabelVolume, eps: f64) -> Result<(f64, FeatureGrid)> {
    let [n, c, d, h, w] = pred.shape();
    let [nx, ny, nz] = labels.dims();
    if n != 1 || [d, h, w] != [nz, ny, nx] {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match labels {:?}",
            pred.shape(),
            labels.dims()
        )));
    }
    let v = pred.voxels();
    let lab = labels.data();
    let mut labeled = 0usize;
    for (i, &l) in lab.iter().enumerate() {
        if l == UNLABELED {
            continue;
        }
        if l as usize >= c {
            return Err(Error::LabelOutOfRange { code: l as u32, offset: i });
        }
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::invalid("no labeled voxels"));
    }

    let p = pred.data();
    let mut inter = vec![0.0; c];
    let mut total = vec![0.0; c];
    for (i, &l) in lab.iter().enumerate() {
        if l == UNLABELED {
            continue;
        }
        for ch in 0..c {
            total[ch] += p[ch * v + i];
        }
        inter[l as usize] += p[l as usize * v + i];
        total[l as usize] += 1.0;
    }
    let mut score = 0.0;
    for ch in 0..c {
        score += 2.0 * inter[ch] / (total[ch] + eps);
    }
    let loss = 1.0 - score / c as f64;

    let mut grad = FeatureGrid::zeros(pred.shape());
    let g = grad.data_mut();
    for ch in 0..c {
        let den = total[ch] + eps;
        let miss = -2.0 * inter[ch] / (den * den);
        let hit = 2.0 / den + miss;
        let (gm, gh) = (-miss / c as f64, -hit / c as f64);
        let row = &mut g[ch * v..(ch + 1) * v];
        for (i, &l) in lab.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            row[i] = if l as usize == ch { gh } else { gm };
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordunet::layers::tests::{fd_error, random_grid};
    use crate::coordunet::layers::{softmax_channels, softmax_channels_backward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_voxel_uniform_prediction() {
        let mut labels = LabelVolume::filled([3, 2, 2], UNLABELED);
        labels.data_mut()[4] = 3;
        let pred = FeatureGrid::from_vec([1, 14, 2, 2, 3], vec![1.0 / 14.0; 14 * 12]).unwrap();
        let (loss, _) = masked_dice_loss(&pred, &labels, 0.0).unwrap();
        assert!((loss - (1.0 - 1.0 / 105.0)).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn perfect_one_hot_gives_zero_loss() {
        let codes: Vec<u8> = (0..28).map(|i| (i % 14) as u8).collect();
        let labels = LabelVolume::new([7, 2, 2], codes.clone()).unwrap();
        let mut pred = FeatureGrid::zeros([1, 14, 2, 2, 7]);
        for (i, &c) in codes.iter().enumerate() {
            pred.channel_mut(0, c as usize)[i] = 1.0;
        }
        let (loss, _) = masked_dice_loss(&pred, &labels, 1e-12).unwrap();
        assert!(loss.abs() < 1e-10);
    }

    #[test]
    fn sentinel_voxels_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labels = LabelVolume::new(
            [4, 4, 4],
            (0..64).map(|_| if rng.random_bool(0.5) { UNLABELED } else { rng.random_range(0..14) }).collect(),
        )
        .unwrap();
        let base = softmax_channels(&random_grid([1, 14, 4, 4, 4], &mut rng));
        let (l0, g0) = masked_dice_loss(&base, &labels, 1e-5).unwrap();
        for _ in 0..20 {
            let mut p = base.clone();
            for (i, &l) in labels.data().iter().enumerate() {
                if l == UNLABELED {
                    for c in 0..14 {
                        p.channel_mut(0, c)[i] = rng.random_range(0.0..1.0);
                    }
                }
            }
            let (l1, g1) = masked_dice_loss(&p, &labels, 1e-5).unwrap();
            assert_eq!(l0.to_bits(), l1.to_bits());
            assert_eq!(g0, g1);
        }
        for (i, &l) in labels.data().iter().enumerate() {
            if l == UNLABELED {
                assert!((0..14).all(|c| g0.channel(0, c)[i] == 0.0));
            }
        }
    }

    #[test]
    fn rejects_fully_unlabeled_and_bad_codes() {
        let pred = FeatureGrid::zeros([1, 14, 1, 1, 2]);
        assert!(masked_dice_loss(&pred, &LabelVolume::filled([2, 1, 1], UNLABELED), 1e-5).is_err());
        assert!(masked_dice_loss(&pred, &LabelVolume::filled([2, 1, 1], 14), 1e-5).is_err());
        assert!(masked_dice_loss(&pred, &LabelVolume::filled([1, 2, 1], 0), 1e-5).is_err());
    }

    #[test]
    fn softmax_dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let shape = [1, 14, 3, 3, 3];
        let labels = LabelVolume::new(
            [3, 3, 3],
            (0..27).map(|_| if rng.random_bool(0.3) { UNLABELED } else { rng.random_range(0..14) }).collect(),
        )
        .unwrap();
        let logits = random_grid(shape, &mut rng);
        let p = softmax_channels(&logits);
        let (_, gp) = masked_dice_loss(&p, &labels, 1e-5).unwrap();
        let g = softmax_channels_backward(&p, &gp);
        let f = |v: &[f64]| {
            let p = softmax_channels(&FeatureGrid::from_vec(shape, v.to_vec()).unwrap());
            masked_dice_loss(&p, &labels, 1e-5).unwrap().0
        };
        assert!(fd_error(logits.data(), g.data(), &f) < 1e-4);
    }
}
