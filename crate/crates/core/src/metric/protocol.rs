//! Seeded sampling of `(image, mask)` pairs for an NSD evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{nsd_estimate, standardize_latents, DistortionReport, LatentSet, LatentVector};
use super::{DEFAULT_IMAGES, DEFAULT_MASKS_PER_IMAGE};
use crate::error::{Error, Result};
use crate::imaging::Sample;
use crate::masking::{Mask, MaskStrategy, RandomBlocks};
use crate::numeric::stream_rng;
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// `n`
    pub masks_per_image: usize,
    /// `k`; fewer are used if the pool is smaller.
    pub images: usize,
    pub seed: u64,
    pub masks: MaskStrategy,
    pub standardize: bool,
}

impl EvalProtocol {
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            masks_per_image: DEFAULT_MASKS_PER_IMAGE,
            images: DEFAULT_IMAGES,
            seed: 0,
            masks: MaskStrategy::RandomBlocks(RandomBlocks::for_size(height, width)),
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks_per_image < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 masks per image, got {}",
                self.masks_per_image
            )));
        }
        if self.images == 0 {
            return Err(Error::InvalidConfig("need at least 1 image".into()));
        }
        Ok(())
    }

    /// Indices of the images drawn from a pool of `pool` samples.
    pub fn select(&self, pool: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..pool).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        idx.truncate(self.images);
        idx
    }

    /// The `n` masks for the `i`-th selected image.
    pub fn masks_for(&self, i: usize, height: usize, width: usize) -> Result<Vec<Mask>> {
        let mut rng = stream_rng(self.seed, i as u64);
        (0..self.masks_per_image)
            .map(|_| self.masks.sample(height, width, &mut rng))
            .collect()
    }
}

/// Identifies one encoder call: selected image `image`, mask `mask`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallId {
    pub image: usize,
    pub mask: usize,
}

/// Encodes every selected image under each of its masks. Images are
/// processed in parallel and assembled in selection order.
pub fn collect_latents<F>(
    pool: &[Sample],
    protocol: &EvalProtocol,
    encode: F,
) -> Result<Vec<LatentSet>>
where
    F: Fn(&Image, &Mask, CallId) -> Result<LatentVector> + Sync,
{
    protocol.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    protocol
        .select(pool.len())
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let s = &pool[idx];
            let masks = protocol.masks_for(i, s.image.height(), s.image.width())?;
            let latents = masks
                .iter()
                .enumerate()
                .map(|(j, m)| encode(&s.image, m, CallId { image: i, mask: j }))
                .collect::<Result<_>>()?;
            Ok(LatentSet::new(s.id.clone(), latents))
        })
        .collect()
}

/// [`nsd_estimate`], standardizing first if the protocol asks for it, with
/// the report labelled by the protocol's mask strategy.
pub fn evaluate(
    sets: &[LatentSet],
    latent_dim: usize,
    protocol: &EvalProtocol,
) -> Result<DistortionReport> {
    let mut report = if protocol.standardize {
        let (std_sets, _) = standardize_latents(sets)?;
        nsd_estimate(&std_sets, latent_dim)?
    } else {
        nsd_estimate(sets, latent_dim)?
    };
    report.standardized = protocol.standardize;
    report.mask_strategy = protocol.masks.name().to_string();
    Ok(report)
}
