use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Outcome of an NSD evaluation over `images` images and
/// `masks_per_image` masks each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistortionReport {
    pub image_ids: Vec<String>,
    pub per_image_dist2: Vec<f64>,
    /// Mean of `per_image_dist2`.
    pub dataset_dist2: f64,
    /// `dataset_dist2 / (2 · latent_dim)`.
    pub nsd_mean: f64,
    /// Sample standard deviation (k − 1 denominator) of the per-image NSD.
    pub nsd_std: f64,
    pub latent_dim: usize,
    pub masks_per_image: usize,
    pub images: usize,
    /// Whether latents were standardized before the estimate.
    pub standardized: bool,
    pub mask_strategy: String,
}

#[derive(Serialize)]
struct Record<'a> {
    image_id: &'a str,
    dist2: f64,
    nsd: f64,
}

impl DistortionReport {
    pub fn per_image_nsd(&self) -> impl Iterator<Item = f64> + '_ {
        let norm = 2.0 * self.latent_dim as f64;
        self.per_image_dist2.iter().map(move |d| d / norm)
    }

    /// `nsd = mean ± std (D=…, n=…, k=…, masks=…, standardized=…)`
    pub fn summary_line(&self) -> String {
        format!(
            "nsd = {:.4} ± {:.4} (D={}, n={}, k={}, masks={}, standardized={})",
            self.nsd_mean,
            self.nsd_std,
            self.latent_dim,
            self.masks_per_image,
            self.images,
            self.mask_strategy,
            if self.standardized { "yes" } else { "no" },
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# normalized squared-distortion report");
        let _ = writeln!(
            out,
            "# ± is the sample standard deviation of per-image NSD over the k images"
        );
        let _ = writeln!(out, "{}", self.summary_line());
        let _ = writeln!(out, "dataset_dist2 = {:.6}", self.dataset_dist2);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>14} {:>10}", "image", "dist2", "nsd");
        for ((id, d), nsd) in self
            .image_ids
            .iter()
            .zip(&self.per_image_dist2)
            .zip(self.per_image_nsd())
        {
            let _ = writeln!(out, "{id:<24} {d:>14.6} {nsd:>10.6}");
        }
        out
    }

    /// One JSON object per image: `{"image_id", "dist2", "nsd"}`.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for ((id, &dist2), nsd) in self
            .image_ids
            .iter()
            .zip(&self.per_image_dist2)
            .zip(self.per_image_nsd())
        {
            serde_json::to_writer(
                &mut w,
                &Record {
                    image_id: id,
                    dist2,
                    nsd,
                },
            )?;
            w.write_all(b"\n")
                .map_err(|e| crate::Error::io("<records>", e))?;
        }
        Ok(())
    }
}
