use std::process::ExitCode;

use anyhow::{Context, Result};
use cce_core::imaging::{synth_dataset, write_dataset};

use crate::config::ExperimentConfig;

pub fn gen_data(cfg: &ExperimentConfig, command_line: &str) -> Result<ExitCode> {
    let out = cfg.output_dir("gen-data");
    let ds = synth_dataset(
        cfg.synth_train + cfg.synth_val,
        cfg.image_size,
        cfg.data_seed,
    )?
    .holdout(cfg.synth_val)?;
    let manifest = write_dataset(&out, &ds)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    cfg.write_resolved(&out, command_line)?;
    println!(
        "wrote {} train + {} val images ({}x{}, seed {}) to {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.height,
        manifest.width,
        manifest.seed,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
