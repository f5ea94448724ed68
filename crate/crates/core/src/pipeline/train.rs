//! The two independent training loops.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{build_rnet, build_snet, NetConfig, Network};
use crate::ops::Reduction;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::phantom::derive_seed;
use crate::pipeline::weights::{save_network, WeightStore};
use crate::tensor::Tensor;
use crate::topology::{argmax_mask, mask_to_thickness, one_hot, simulate_defects, DefectConfig, LabelMask};

/// A flattened, cropped image patch with its label mask.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[1, H, W]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Learning-rate multiplier reached at the last step, following a
    /// cosine from 1.
    pub final_lr_fraction: f64,
    /// Where the best-validation weights are written whenever they improve.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { epochs: 10, batch_size: 4, shuffle: true, final_lr_fraction: 0.1, checkpoint: None }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier for `step` out of `total` steps.
    pub fn lr_factor(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return 1.0;
        }
        let progress = step as f64 / (total - 1) as f64;
        let f = self.final_lr_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-element training loss over the epoch.
    pub train_loss: f64,
    /// Pixel accuracy (S-Net) or thickness MAE in pixels (R-Net).
    pub validation: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Best-validation weights, or the final weights without validation data.
    pub store: WeightStore,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub steps: u64,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DEFECT_STREAM: u64 = 0x4445_4645;

fn check_samples(op: &'static str, cfg: &NetConfig, masks: &[&LabelMask]) -> Result<()> {
    if masks.is_empty() {
        return Err(Error::invalid(op, "empty training set"));
    }
    for m in masks {
        if (m.height(), m.width()) != (cfg.patch_height, cfg.patch_width) || m.num_classes() != cfg.num_classes {
            return Err(Error::shape(
                op,
                format!(
                    "sample {}x{} with {} classes does not match the {}x{} / {}-class network",
                    m.height(),
                    m.width(),
                    m.num_classes(),
                    cfg.patch_height,
                    cfg.patch_width,
                    cfg.num_classes
                ),
            ));
        }
    }
    Ok(())
}

/// Runs the shared epoch/minibatch loop. `accumulate` adds the gradient of
/// the batch-mean loss for the given sample indices into the parameters and
/// returns the summed per-sample loss.
#[allow(clippy::too_many_arguments)]
fn run<F, V>(
    mut net: Network<f32>,
    n: usize,
    opt_cfg: &OptimizerConfig,
    schedule: &Schedule,
    seed: u64,
    lower_is_better: bool,
    mut accumulate: F,
    mut validate: V,
) -> Result<TrainResult>
where
    F: FnMut(&mut Network<f32>, &[usize], &mut ChaCha8Rng) -> Result<f64>,
    V: FnMut(&Network<f32>) -> Result<Option<f64>>,
{
    schedule.validate()?;
    let mut opt = Optimizer::<f32>::new(opt_cfg.clone())?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM));
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DEFECT_STREAM));
    let mut curve = Vec::with_capacity(schedule.epochs);
    // values only: gradients and optimizer state are not needed to restore
    let mut best: Option<(f64, Vec<Tensor<f32>>, usize)> = None;
    let mut steps = 0u64;
    let total_steps = (schedule.epochs * n.div_ceil(schedule.batch_size)) as u64;

    for epoch in 1..=schedule.epochs {
        let started = Instant::now();
        if schedule.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            opt.set_lr_factor(schedule.lr_factor(steps, total_steps));
            total += accumulate(&mut net, batch, &mut data_rng).map_err(|e| match e {
                Error::NonFinite(what) => abort(epoch, steps, &what, schedule),
                other => other,
            })?;
            opt.step(&mut net.params).map_err(|e| match e {
                Error::NonFinite(what) => abort(epoch, steps, &what, schedule),
                other => other,
            })?;
            steps += 1;
        }
        let validation = validate(&net)?;
        let stats = EpochStats {
            epoch,
            train_loss: total / n as f64,
            validation,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, validation {:?}, {:.1}s",
            stats.train_loss,
            stats.validation,
            stats.seconds
        );
        curve.push(stats);
        if let Some(v) = validation {
            let improved = match &best {
                None => true,
                Some((b, _, _)) => (lower_is_better && v < *b) || (!lower_is_better && v > *b),
            };
            if improved {
                if let Some(path) = &schedule.checkpoint {
                    save_network(&net, seed, steps, path)?;
                }
                // release the old snapshot before taking the new one
                drop(best.take());
                best = Some((v, net.params.iter().map(|p| p.value.clone()).collect(), epoch));
            }
        }
    }

    drop(opt);
    let best_epoch = match best {
        Some((_, values, epoch)) => {
            for (p, v) in net.params.iter_mut().zip(values) {
                p.value = v;
            }
            epoch
        }
        None => {
            if let Some(path) = &schedule.checkpoint {
                save_network(&net, seed, steps, path)?;
            }
            schedule.epochs
        }
    };
    Ok(TrainResult { store: WeightStore::from_owned(net, seed, steps), curve, best_epoch, steps })
}

fn finite_loss(tape: &Tape<f32>, loss: Var) -> Result<f64> {
    let value = tape.loss(loss).expect("loss node").mean;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("loss".into()))
    }
}

fn abort(epoch: usize, step: u64, what: &str, schedule: &Schedule) -> Error {
    let last = match &schedule.checkpoint {
        Some(p) if p.exists() => format!("last good checkpoint {}", p.display()),
        _ => "no checkpoint written".to_string(),
    };
    Error::NonFinite(format!("{what} at epoch {epoch}, step {step}; {last}"))
}

/// Pixel accuracy of S-Net's argmax labels.
pub fn pixel_accuracy(net: &Network<f32>, samples: &[Sample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let pred = argmax_mask(&net.snet_forward(&s.image)?)?;
        hit += pred.labels().iter().zip(s.mask.labels()).filter(|(a, b)| a == b).count();
        total += pred.labels().len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Mean absolute thickness error of R-Net on clean one-hot masks, pixels.
pub fn thickness_mae(net: &Network<f32>, masks: &[LabelMask]) -> Result<f64> {
    let (mut err, mut count) = (0.0, 0usize);
    for m in masks {
        let pred = net.rnet_forward(&one_hot::<f32>(m, net.config().num_classes)?)?;
        let truth = mask_to_thickness(m)?;
        err += pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += truth.data().len();
    }
    Ok(err / count.max(1) as f64)
}

/// Trains S-Net with per-pixel cross-entropy.
pub fn train_snet(
    train: &[Sample],
    validation: &[Sample],
    cfg: &NetConfig,
    opt: &OptimizerConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainResult> {
    check_samples("train_snet", cfg, &train.iter().chain(validation).map(|s| &s.mask).collect::<Vec<_>>())?;
    let labels: Vec<Vec<usize>> = train.iter().map(|s| s.mask.labels_usize()).collect();
    let net = build_snet::<f32>(cfg, seed)?;
    run(
        net,
        train.len(),
        opt,
        schedule,
        seed,
        false,
        |net, batch, _| {
            let mut total = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let x = tape.input(train[i].image.clone())?;
                let logits = net.forward(&mut tape, x)?;
                let loss = tape.softmax_cross_entropy(logits, &labels[i], Reduction::Mean)?;
                total += finite_loss(&tape, loss)?;
                tape.backward_scaled(loss, 1.0 / batch.len() as f32, &mut net.params)?;
            }
            Ok(total)
        },
        |net| {
            if validation.is_empty() {
                Ok(None)
            } else {
                pixel_accuracy(net, validation).map(Some)
            }
        },
    )
}

/// Trains R-Net on ground-truth masks with freshly simulated defects at
/// every step.
pub fn train_rnet(
    train: &[LabelMask],
    validation: &[LabelMask],
    cfg: &NetConfig,
    defects: &DefectConfig,
    opt: &OptimizerConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainResult> {
    check_samples("train_rnet", cfg, &train.iter().chain(validation).collect::<Vec<_>>())?;
    defects.validate()?;
    let onehots: Vec<Tensor<f32>> = train.iter().map(|m| one_hot(m, cfg.num_classes)).collect::<Result<_>>()?;
    let net = build_rnet::<f32>(cfg, seed)?;
    run(
        net,
        train.len(),
        opt,
        schedule,
        seed,
        true,
        |net, batch, rng| {
            let outputs = cfg.num_boundaries * cfg.patch_width;
            let mut tape = Tape::new();
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len() * outputs);
            for &i in batch {
                let sample = simulate_defects(&onehots[i], defects, rng)?;
                targets.extend(sample.target.data().iter().map(|&v| v as f32));
                inputs.push(tape.input(sample.input)?);
            }
            let y = net.forward_batch(&mut tape, &inputs)?;
            let target = Tensor::new(&[batch.len(), outputs], targets)?;
            // the batch mean equals the mean of per-sample means
            let loss = tape.mse(y, &target, Reduction::Mean)?;
            let mean = finite_loss(&tape, loss)?;
            tape.backward(loss, &mut net.params)?;
            Ok(mean * batch.len() as f64)
        },
        |net| {
            if validation.is_empty() {
                Ok(None)
            } else {
                thickness_mae(net, validation).map(Some)
            }
        },
    )
}
