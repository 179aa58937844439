//! Subcommand implementations.

mod data;
mod eval;
mod gradcheck;
mod inpaint;
mod masks;
mod train;

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use cce_core::imaging::{read_dataset, synth_dataset, Dataset};
use serde::Serialize;

use crate::config::{usage, ExperimentConfig};

pub use data::gen_data;
pub use eval::{eval_nsd, EvalInputs};
pub use gradcheck::grad_check;
pub use inpaint::inpaint;
pub use masks::mask_preview;
pub use train::train;

/// The dataset at `data_dir`, or the synthetic dataset built in memory.
pub(crate) fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.data_dir.is_empty() {
        return Ok(synth_dataset(
            cfg.synth_train + cfg.synth_val,
            cfg.image_size,
            cfg.data_seed,
        )?
        .holdout(cfg.synth_val)?);
    }
    let ds = read_dataset(Path::new(&cfg.data_dir))
        .with_context(|| format!("reading dataset {}", cfg.data_dir))?;
    if let Some(shape) = ds.shape() {
        if shape.height != cfg.image_size || shape.width != cfg.image_size {
            return Err(usage(format!(
                "dataset {} holds {}x{} images but image_size is {}",
                cfg.data_dir, shape.height, shape.width, cfg.image_size
            )));
        }
    }
    Ok(ds)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Appends serialized records to a JSON-lines file, one per call.
pub(crate) struct JsonLines(fs::File);

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}
