//! Two-stage cascade context encoder.
//!
//! A frozen half-resolution encoder fills the dropped region coarsely. Its
//! output is upscaled, pasted into the missing region of the full-resolution
//! image, and the composite is refined by a second, full-resolution encoder:
//!
//! ```text
//! stage2_input = M̄ ⊙ P + M ⊙ ↗F₁(↘(M̄ ⊙ P))
//! ```

mod container;
mod train;

use sha2::{Digest, Sha256};

pub use crate::resample::{downscale, upscale};
pub use container::{read_cascade, read_model, write_cascade, CascadeCheckpoint, CascadeManifest};
pub use train::{
    fixed_masks, held_out_loss, train_baseline, train_network, train_stage1, train_stage2,
    EpochRecord, StageSetup, TrainTask,
};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, composite, Mask};
use crate::metric::LatentVector;
use crate::nn::{
    adversarial_losses, check_gradients, combined_signature, layer_names, masked_rec_loss,
    Checkpoint, GradCheckConfig, GradCheckReport, Gradients, Network, Probe,
};
use crate::tensor::{Image, Shape};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A stage-1 checkpoint kept together with its exact serialized bytes.
///
/// There is no mutable access to the network: a cascade can only read it,
/// and writing a cascade copies the original bytes unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStage {
    bytes: Vec<u8>,
    checkpoint: Checkpoint,
}

impl FrozenStage {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let checkpoint = Checkpoint::from_bytes(&bytes)?;
        Ok(Self { bytes, checkpoint })
    }

    /// Freezes an in-memory checkpoint. The network is reloaded from its
    /// serialized form, so it holds exactly the stored values.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        Self::from_bytes(checkpoint.to_bytes()?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn network(&self) -> &Network {
        &self.checkpoint.network
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stage1: FrozenStage,
    pub stage2: Network,
    /// Per-channel value written into dropped pixels at both scales.
    pub fill: Vec<f64>,
}

fn check_image_to_image(net: &Network, what: &str) -> Result<Shape> {
    let input = net.spec.input;
    let output = net.spec.output_shape()?;
    if input != output {
        return Err(Error::InvalidSpec(format!(
            "{what} maps {input} to {output}; an inpainting network must preserve its shape"
        )));
    }
    Ok(input)
}

impl CascadeModel {
    pub fn new(stage1: FrozenStage, stage2: Network, fill: Vec<f64>) -> Result<Self> {
        let s1 = check_image_to_image(stage1.network(), "stage 1")?;
        let s2 = check_image_to_image(&stage2, "stage 2")?;
        if s2.height % 2 != 0 || s2.width % 2 != 0 {
            return Err(Error::OddDimension {
                height: s2.height,
                width: s2.width,
            });
        }
        let half = Shape::new(s2.channels, s2.height / 2, s2.width / 2);
        if s1 != half {
            return Err(Error::InvalidSpec(format!(
                "stage 1 takes {s1}, stage 2 takes {s2}; stage 1 must be exactly half resolution ({half})"
            )));
        }
        if fill.len() != s2.channels {
            return Err(Error::mismatch(
                format!("{} fill channels", s2.channels),
                fill.len(),
            ));
        }
        Ok(Self {
            stage1,
            stage2,
            fill,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.stage2.spec.input
    }
}

/// Cascade front end with an arbitrary stage-1 function.
///
/// The region is dropped at full resolution before downscaling, so no
/// missing pixel leaks into the half-resolution context. Returns the
/// stage-2 input and the upscaled coarse fill.
pub fn cascade_fill_with<F>(
    stage1: F,
    fill: &[f64],
    image: &Image,
    mask: &Mask,
) -> Result<(Image, Image)>
where
    F: FnOnce(&Image) -> Result<Image>,
{
    let dropped = apply_mask(image, mask, fill)?;
    let small_mask = mask.downscale()?;
    let small = apply_mask(&downscale(&dropped)?, &small_mask, fill)?;
    let coarse_small = stage1(&small)?;
    coarse_small.ensure_shape(small.shape())?;
    let coarse = upscale(&coarse_small);
    let stage2_input = composite(image, &coarse, mask)?;
    Ok((stage2_input, coarse))
}

pub fn cascade_fill(model: &CascadeModel, image: &Image, mask: &Mask) -> Result<(Image, Image)> {
    image.ensure_shape(model.input_shape())?;
    cascade_fill_with(
        |x| model.stage1.network().forward(x).map(|(o, _)| o),
        &model.fill,
        image,
        mask,
    )
}

#[derive(Debug, Clone)]
pub struct CascadeRecOutcome {
    pub loss: f64,
    /// Gradient of `loss` with respect to the stage-2 parameters.
    pub stage2_grads: Gradients,
    pub output: Image,
}

/// Masked reconstruction loss of stage 2 on the cascade composite.
pub fn cascade_rec_loss(
    model: &CascadeModel,
    image: &Image,
    mask: &Mask,
) -> Result<CascadeRecOutcome> {
    let (input, _) = cascade_fill(model, image, mask)?;
    let (output, tape) = model.stage2.forward(&input)?;
    let (loss, grad) = masked_rec_loss(image, &output, mask)?;
    let (stage2_grads, _) = model.stage2.backward(&tape, &grad)?;
    Ok(CascadeRecOutcome {
        loss,
        stage2_grads,
        output,
    })
}

#[derive(Debug, Clone)]
pub struct CascadeAdvOutcome {
    pub disc_loss: f64,
    /// Non-saturating generator loss.
    pub gen_loss: f64,
    pub disc_grads: Gradients,
    /// Gradient of `gen_loss` with respect to the stage-2 parameters.
    pub stage2_grads: Gradients,
}

/// Discriminator on real images against stage-2 outputs on the cascade
/// composites.
pub fn cascade_adv_loss(
    model: &CascadeModel,
    disc: &Network,
    images: &[Image],
    masks: &[Mask],
) -> Result<CascadeAdvOutcome> {
    if images.len() != masks.len() {
        return Err(Error::mismatch(
            format!("{} masks", images.len()),
            masks.len(),
        ));
    }
    let mut fakes = Vec::with_capacity(images.len());
    let mut tapes = Vec::with_capacity(images.len());
    for (img, m) in images.iter().zip(masks) {
        let (input, _) = cascade_fill(model, img, m)?;
        let (out, tape) = model.stage2.forward(&input)?;
        fakes.push(out);
        tapes.push(tape);
    }
    let adv = adversarial_losses(disc, images, &fakes)?;
    let mut stage2_grads = Gradients::zeros_like(&model.stage2.params.layers);
    for (tape, g) in tapes.iter().zip(&adv.fake_grads) {
        stage2_grads.accumulate(&model.stage2.backward(tape, g)?.0);
    }
    Ok(CascadeAdvOutcome {
        disc_loss: adv.disc_loss,
        gen_loss: adv.gen_loss,
        disc_grads: adv.disc_grads,
        stage2_grads,
    })
}

/// Central-difference check of [`cascade_rec_loss`] over the stage-2
/// parameters.
pub fn cascade_rec_grad_check(
    model: &CascadeModel,
    image: &Image,
    mask: &Mask,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = cascade_rec_loss(model, image, mask)?.stage2_grads;
    let (input, _) = cascade_fill(model, image, mask)?;
    let mut probe = model.clone();
    let mut layers = probe.stage2.params.layers.clone();
    check_gradients(
        &mut layers,
        &layer_names(&model.stage2.spec),
        &analytic,
        |ls| {
            probe.stage2.params.layers = ls.to_vec();
            let loss = cascade_rec_loss(&probe, image, mask)?.loss;
            let (_, tape) = probe.stage2.forward(&input)?;
            Ok(Probe {
                value: loss,
                signature: tape.kink_signature(&probe.stage2.spec),
            })
        },
        cfg,
    )
}

fn adv_signature(
    model: &CascadeModel,
    disc: &Network,
    images: &[Image],
    masks: &[Mask],
) -> Result<u64> {
    let mut parts = Vec::new();
    for (img, m) in images.iter().zip(masks) {
        let (input, _) = cascade_fill(model, img, m)?;
        let (out, tape) = model.stage2.forward(&input)?;
        parts.push(tape.kink_signature(&model.stage2.spec));
        parts.push(disc.forward(&out)?.1.kink_signature(&disc.spec));
        parts.push(disc.forward(img)?.1.kink_signature(&disc.spec));
    }
    Ok(combined_signature(&parts))
}

/// Central-difference check of [`cascade_adv_loss`]: the generator loss
/// over the stage-2 parameters and the discriminator loss over the
/// discriminator parameters.
pub fn cascade_adv_grad_check(
    model: &CascadeModel,
    disc: &Network,
    images: &[Image],
    masks: &[Mask],
    cfg: &GradCheckConfig,
) -> Result<(GradCheckReport, GradCheckReport)> {
    let base = cascade_adv_loss(model, disc, images, masks)?;
    let mut probe = model.clone();
    let mut layers = probe.stage2.params.layers.clone();
    let gen = check_gradients(
        &mut layers,
        &layer_names(&model.stage2.spec),
        &base.stage2_grads,
        |ls| {
            probe.stage2.params.layers = ls.to_vec();
            Ok(Probe {
                value: cascade_adv_loss(&probe, disc, images, masks)?.gen_loss,
                signature: adv_signature(&probe, disc, images, masks)?,
            })
        },
        cfg,
    )?;
    let mut d = disc.clone();
    let mut layers = d.params.layers.clone();
    let dis = check_gradients(
        &mut layers,
        &layer_names(&disc.spec),
        &base.disc_grads,
        |ls| {
            d.params.layers = ls.to_vec();
            Ok(Probe {
                value: cascade_adv_loss(model, &d, images, masks)?.disc_loss,
                signature: adv_signature(model, &d, images, masks)?,
            })
        },
        cfg,
    )?;
    Ok((gen, dis))
}

/// A trained inpainting model: one context encoder or a cascade.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Inpainter {
    Single { network: Network, fill: Vec<f64> },
    Cascade(CascadeModel),
}

/// Intermediate images of one inpainting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Input with the region replaced by the fill colour.
    pub masked: Image,
    /// Upscaled stage-1 output (cascades only).
    pub coarse: Option<Image>,
    /// Network input: `masked` for a single encoder, the composite for a
    /// cascade.
    pub input: Image,
    /// Raw network output.
    pub output: Image,
    /// `output` pasted into the missing region of the original.
    pub result: Image,
}

impl Inpainter {
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        check_image_to_image(&checkpoint.network, "network")?;
        Ok(Inpainter::Single {
            fill: checkpoint.meta.fill.clone(),
            network: checkpoint.network,
        })
    }

    /// The network that produces the final output and the latent.
    pub fn network(&self) -> &Network {
        match self {
            Inpainter::Single { network, .. } => network,
            Inpainter::Cascade(m) => &m.stage2,
        }
    }

    pub fn fill(&self) -> &[f64] {
        match self {
            Inpainter::Single { fill, .. } => fill,
            Inpainter::Cascade(m) => &m.fill,
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.network().spec.input
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Inpainter::Single { .. } => "single",
            Inpainter::Cascade(_) => "cascade",
        }
    }

    /// Network input and, for cascades, the coarse fill.
    pub fn prepare(&self, image: &Image, mask: &Mask) -> Result<(Image, Option<Image>)> {
        image.ensure_shape(self.input_shape())?;
        match self {
            Inpainter::Single { fill, .. } => Ok((apply_mask(image, mask, fill)?, None)),
            Inpainter::Cascade(m) => {
                let (input, coarse) = cascade_fill(m, image, mask)?;
                Ok((input, Some(coarse)))
            }
        }
    }

    pub fn predict(&self, image: &Image, mask: &Mask) -> Result<Prediction> {
        let (input, coarse) = self.prepare(image, mask)?;
        let (output, _) = self.network().forward(&input)?;
        Ok(Prediction {
            masked: apply_mask(image, mask, self.fill())?,
            coarse,
            result: composite(image, &output, mask)?,
            input,
            output,
        })
    }

    pub fn encode(&self, image: &Image, mask: &Mask) -> Result<LatentVector> {
        let (input, _) = self.prepare(image, mask)?;
        self.network().encode(&input)
    }

    pub fn latent_dim(&self) -> Result<usize> {
        self.network().latent_dim()
    }
}

/// `M̄ ⊙ image + M ⊙ prediction`. Context pixels are copied from `image`.
pub fn inpaint(model: &Inpainter, image: &Image, mask: &Mask) -> Result<Image> {
    Ok(model.predict(image, mask)?.result)
}
