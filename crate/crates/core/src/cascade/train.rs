use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cascade_fill, downscale, CascadeModel, FrozenStage};
use crate::error::{Error, Result};
use crate::imaging::NORMALIZATION;
use crate::masking::{apply_mask, Mask, MaskStrategy};
use crate::nn::{
    adversarial_losses, masked_rec_loss, optimizer_step, AdamConfig, Checkpoint, Gradients,
    ModelMeta, Network, NetworkSpec, TrainConfig,
};
use crate::numeric::stream_rng;
use crate::tensor::{Image, Tensor};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean masked reconstruction loss over the epoch's samples.
    pub rec_loss: f64,
    /// Mean non-saturating generator loss; zero when adversarial training
    /// is off.
    pub adv_loss: f64,
    pub wall_seconds: f64,
}

/// Inputs to [`train_network`]. Targets are the images at the network's
/// resolution.
pub struct TrainTask<'a> {
    pub images: &'a [Image],
    /// Draws a mask at the network's resolution.
    pub sample_mask: &'a (dyn Fn(&mut ChaCha8Rng) -> Result<Mask> + Sync),
    /// Builds the network input from a target image and its mask.
    pub make_input: &'a (dyn Fn(&Image, &Mask) -> Result<Tensor> + Sync),
}

const MASK_STREAM: u64 = 0x6d61_736b;

struct SampleResult {
    rec: f64,
    grads: Gradients,
    output: Tensor,
    tape: crate::nn::Tape,
}

/// Minibatch Adam on `λ_rec·rec + λ_adv·gen`, updating `disc` alongside when
/// adversarial training is on.
///
/// Samples of a batch are processed in parallel and their gradients summed
/// in sample order, so results do not depend on the thread count. Epoch
/// order and masks are functions of `cfg.seed`.
pub fn train_network(
    net: &mut Network,
    mut disc: Option<&mut Network>,
    task: &TrainTask,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if task.images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    if cfg.adversarial_enabled && disc.is_none() {
        return Err(Error::InvalidConfig(
            "adversarial training needs a discriminator".into(),
        ));
    }
    let adam = AdamConfig::new(cfg.learning_rate);
    let lambda_adv = cfg.effective_lambda_adv();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..task.images.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        let mut rec_total = 0.0;
        let mut adv_total = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let b = batch.len() as f64;
            let base = (epoch * task.images.len() + batch_idx * cfg.batch_size) as u64;
            let results: Vec<SampleResult> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = stream_rng(cfg.seed ^ MASK_STREAM, base + j as u64);
                    let target = &task.images[i];
                    let mask = (task.sample_mask)(&mut rng)?;
                    let input = (task.make_input)(target, &mask)?;
                    let (output, tape) = net.forward(&input)?;
                    let (rec, g) = masked_rec_loss(target, &output, &mask)?;
                    let (grads, _) = net.backward(&tape, &g.map(|v| v * cfg.lambda_rec / b))?;
                    Ok(SampleResult {
                        rec,
                        grads,
                        output,
                        tape,
                    })
                })
                .collect::<Result<_>>()?;
            let rec: f64 = results.iter().map(|r| r.rec).sum::<f64>() / b;
            if !rec.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            rec_total += rec * b;
            let mut grads = Gradients::sum_ordered(results.iter().map(|r| &r.grads))
                .expect("batch is non-empty");

            if let (true, Some(d)) = (cfg.adversarial_enabled, disc.as_deref_mut()) {
                let real: Vec<Tensor> = batch.iter().map(|&i| task.images[i].clone()).collect();
                let fake: Vec<Tensor> = results.iter().map(|r| r.output.clone()).collect();
                let adv = adversarial_losses(d, &real, &fake)?;
                if !adv.gen_loss.is_finite() || !adv.disc_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                adv_total += adv.gen_loss * b;
                let adv_grads: Vec<Gradients> = results
                    .par_iter()
                    .zip(&adv.fake_grads)
                    .map(|(r, g)| {
                        net.backward(&r.tape, &g.map(|v| v * lambda_adv))
                            .map(|x| x.0)
                    })
                    .collect::<Result<_>>()?;
                for g in &adv_grads {
                    grads.accumulate(g);
                }
                optimizer_step(&mut d.params, &adv.disc_grads, &adam)?;
            }
            optimizer_step(&mut net.params, &grads, &adam)?;
        }
        let n = task.images.len() as f64;
        let record = EpochRecord {
            epoch,
            rec_loss: rec_total / n,
            adv_loss: adv_total / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// `count` masks from `strategy`, reproducible from `seed`.
pub fn fixed_masks(
    strategy: &MaskStrategy,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Mask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| strategy.sample(height, width, &mut rng))
        .collect()
}

/// Mean masked reconstruction loss of `predict` over `(image, mask)` pairs.
pub fn held_out_loss<F>(predict: F, images: &[Image], masks: &[Mask]) -> Result<f64>
where
    F: Fn(&Image, &Mask) -> Result<Tensor> + Sync,
{
    if images.len() != masks.len() {
        return Err(Error::mismatch(
            format!("{} masks", images.len()),
            masks.len(),
        ));
    }
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let losses: Vec<f64> = images
        .par_iter()
        .zip(masks)
        .map(|(img, m)| masked_rec_loss(img, &predict(img, m)?, m).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Architecture and data settings shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSetup {
    pub masks: MaskStrategy,
    pub fill: Vec<f64>,
    /// Encoder channels per downsampling stage.
    pub channels: Vec<usize>,
    /// Discriminator channels, used when adversarial training is on.
    pub disc_channels: Vec<usize>,
}

fn square_side(images: &[Image]) -> Result<usize> {
    let first = images.first().ok_or(Error::Empty("training images"))?;
    if first.height() != first.width() {
        return Err(Error::mismatch("square images", first.shape()));
    }
    for im in images {
        im.ensure_shape(first.shape())?;
    }
    Ok(first.height())
}

fn fit(
    spec: NetworkSpec,
    task: &TrainTask,
    setup: &StageSetup,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let size = spec.input.height;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(spec, &mut rng)?;
    let mut disc = if cfg.adversarial_enabled {
        Some(Network::init(
            NetworkSpec::discriminator(size, &setup.disc_channels)?,
            &mut rng,
        )?)
    } else {
        None
    };
    train_network(&mut net, disc.as_mut(), task, cfg, log)?;
    Ok(Checkpoint {
        network: net,
        config: cfg.clone(),
        meta: ModelMeta {
            normalization: NORMALIZATION.into(),
            fill: setup.fill.clone(),
            masks: setup.masks,
        },
        seed: cfg.seed,
    })
}

/// Single full-resolution context encoder.
pub fn train_baseline(
    images: &[Image],
    setup: &StageSetup,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let size = square_side(images)?;
    let sample_mask = |rng: &mut ChaCha8Rng| setup.masks.sample(size, size, rng);
    let make_input = |img: &Image, m: &Mask| apply_mask(img, m, &setup.fill);
    let task = TrainTask {
        images,
        sample_mask: &sample_mask,
        make_input: &make_input,
    };
    fit(
        NetworkSpec::context_encoder(size, &setup.channels)?,
        &task,
        setup,
        cfg,
        log,
    )
}

/// Half-resolution encoder on downscaled `images`, with masks drawn at full
/// resolution and downscaled.
pub fn train_stage1(
    images: &[Image],
    setup: &StageSetup,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let size = square_side(images)?;
    let small: Vec<Image> = images.par_iter().map(downscale).collect::<Result<_>>()?;
    let sample_mask = |rng: &mut ChaCha8Rng| setup.masks.sample(size, size, rng)?.downscale();
    let make_input = |img: &Image, m: &Mask| apply_mask(img, m, &setup.fill);
    let task = TrainTask {
        images: &small,
        sample_mask: &sample_mask,
        make_input: &make_input,
    };
    fit(
        NetworkSpec::context_encoder(size / 2, &setup.channels)?,
        &task,
        setup,
        cfg,
        log,
    )
}

/// Full-resolution encoder trained on cascade composites from the frozen
/// `stage1`. Returns the cascade and the stage-2 checkpoint.
pub fn train_stage2(
    stage1: FrozenStage,
    images: &[Image],
    setup: &StageSetup,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<(CascadeModel, Checkpoint)> {
    let size = square_side(images)?;
    let spec = NetworkSpec::context_encoder(size, &setup.channels)?;
    let placeholder = Network::new(spec.clone(), crate::nn::Parameters::zeros(&spec)?)?;
    let frame = CascadeModel::new(stage1, placeholder, setup.fill.clone())?;
    let sample_mask = |rng: &mut ChaCha8Rng| setup.masks.sample(size, size, rng);
    let make_input = |img: &Image, m: &Mask| cascade_fill(&frame, img, m).map(|(x, _)| x);
    let task = TrainTask {
        images,
        sample_mask: &sample_mask,
        make_input: &make_input,
    };
    let checkpoint = fit(spec, &task, setup, cfg, log)?;
    let model = CascadeModel {
        stage2: checkpoint.network.clone(),
        ..frame
    };
    Ok((model, checkpoint))
}
