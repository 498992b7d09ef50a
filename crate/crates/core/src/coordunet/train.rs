use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::FeatureGrid;
use super::loss::masked_dice_loss;
use super::net::UNet;
use super::optim::AdamW;
use super::{LrSchedule, NetworkConfig, TrainConfig};
use crate::augment::augment_pair;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume, BACKGROUND};

/// One image with its (sparse) label volume.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: UNet,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Mean validation loss per epoch; empty without validation data.
    pub validation_history: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rates: Vec<f64>,
    pub stopped_early: bool,
}

/// Train from a freshly initialized network.
///
/// All randomness (initialization, sample order, augmentation) derives from
/// `net_cfg.seed`, so identical inputs give bit-identical results.
pub fn train(
    dataset: &[Sample],
    validation: &[Sample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one labeled volume"));
    }
    for s in dataset.iter().chain(validation) {
        s.image.same_dims(&s.labels)?;
        s.labels.validate_codes()?;
    }
    let mut net = UNet::new(net_cfg.clone())?;
    let mut opt = AdamW::new(net.params(), cfg.beta1, cfg.beta2, cfg.adam_epsilon, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(net_cfg.seed);
    rng.set_stream(1);

    let mut out = TrainOutcome {
        net: net.clone(),
        loss_history: Vec::new(),
        validation_history: Vec::new(),
        step_losses: Vec::new(),
        learning_rates: Vec::new(),
        stopped_early: false,
    };
    let mut lr = cfg.learning_rate;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &dataset[i];
                let (img, lab) = match &cfg.augmentation {
                    Some(a) => augment_pair(&s.image, &s.labels, a, &mut rng)?,
                    None => (s.image.crop_center(cfg.crop_dims)?, s.labels.crop_center(cfg.crop_dims)?),
                };
                let tape = net.forward_with_tape(&img)?;
                let (loss, g) = masked_dice_loss(&tape.probs, &lab, net_cfg.dice_epsilon)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step });
                }
                let gs = net.backward(&tape, &g)?;
                batch_loss += loss;
                match &mut grads {
                    None => grads = Some(gs),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&gs) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("nonempty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= inv;
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            opt.step(net.params_mut(), &grads, lr);
            out.step_losses.push(batch_loss * inv);
            epoch_loss += batch_loss;
            step += 1;
        }
        out.learning_rates.push(lr);
        let train_loss = epoch_loss / dataset.len() as f64;
        out.loss_history.push(train_loss);
        let monitored = if validation.is_empty() {
            train_loss
        } else {
            let v = validation_loss(&net, validation, cfg.crop_dims)?;
            out.validation_history.push(v);
            v
        };
        if monitored < best {
            best = monitored;
            stale = 0;
        } else {
            stale += 1;
        }
        match cfg.schedule {
            LrSchedule::Constant => {}
            LrSchedule::Plateau { factor, patience } => {
                if stale > 0 && stale % patience.max(1) == 0 {
                    lr *= factor;
                }
            }
            LrSchedule::Step { factor, every } => {
                if (epoch + 1) % every == 0 {
                    lr *= factor;
                }
            }
        }
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            out.stopped_early = true;
            break;
        }
    }
    out.net = net;
    Ok(out)
}

fn validation_loss(net: &UNet, samples: &[Sample], crop: [usize; 3]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let probs = net.forward(&s.image.crop_center(crop)?)?;
        total += masked_dice_loss(&probs, &s.labels.crop_center(crop)?, net.config().dice_epsilon)?.0;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// Hard segmentation at the original dims; background outside the crop.
    pub labels: LabelVolume,
    /// Probabilities `(1, classes, nz, ny, nx)` at the original dims; outside
    /// the crop the background class has probability 1.
    pub probabilities: FeatureGrid,
}

impl Inference {
    /// One class channel as a volume on the grid of `like`.
    pub fn probability_volume(&self, class: usize, like: &ScalarVolume) -> ScalarVolume {
        like.same_grid(self.probabilities.channel(0, class).to_vec())
    }
}

/// Per-voxel index of the most probable class of the first batch entry,
/// lowest index on exact ties.
pub fn argmax_classes(probs: &FeatureGrid) -> Vec<u8> {
    let classes = probs.channels();
    let v = probs.voxels();
    let p = probs.data();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if p[c * v + i] > p[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Center-crop, predict, take the per-voxel argmax (lowest class on ties)
/// and pad back to the input dims.
pub fn infer(net: &UNet, image: &ScalarVolume, crop_dims: [usize; 3]) -> Result<Inference> {
    let dims = image.dims();
    let cropped = image.crop_center(crop_dims)?;
    let probs = net.forward(&cropped)?;
    let classes = probs.channels();
    let labels = cropped.same_grid(argmax_classes(&probs)).pad_to(dims, BACKGROUND)?;
    let mut full = FeatureGrid::zeros([1, classes, dims[2], dims[1], dims[0]]);
    for c in 0..classes {
        let fill = if c == 0 { 1.0 } else { 0.0 };
        let ch = cropped.same_grid(probs.channel(0, c).to_vec()).pad_to(dims, fill)?;
        full.channel_mut(0, c).copy_from_slice(ch.data());
    }
    Ok(Inference {
        labels,
        probabilities: full,
    })
}
