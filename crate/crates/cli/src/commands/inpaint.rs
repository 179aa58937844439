use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cce_core::cascade::read_model;
use cce_core::imaging::{hstack, load_png, save_png, Sample};
use cce_core::masking::{coverage, Mask, MaskStrategy};
use cce_core::numeric::stream_rng;
use rayon::prelude::*;

use super::load_dataset;
use crate::config::{usage, ExperimentConfig};
use crate::MaskKind;

/// PNG files named by `paths`; directories contribute their PNGs in name
/// order.
fn collect_images(paths: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files
        .par_iter()
        .map(|f| {
            let id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let image = load_png(f).with_context(|| format!("loading {}", f.display()))?;
            Ok(Sample { id, image })
        })
        .collect()
}

pub fn inpaint(
    cfg: &ExperimentConfig,
    model_path: &Path,
    images: &[PathBuf],
    count: usize,
    mask: Option<MaskKind>,
    mask_seed: u64,
    command_line: &str,
) -> Result<ExitCode> {
    let model = read_model(model_path)
        .with_context(|| format!("reading model {}", model_path.display()))?;
    let samples = if images.is_empty() {
        let ds = load_dataset(cfg)?;
        let pool = if ds.val.is_empty() { ds.train } else { ds.val };
        pool.into_iter().take(count).collect()
    } else {
        collect_images(images)?
    };
    if samples.is_empty() {
        return Err(usage("no images to inpaint"));
    }
    let shape = model.input_shape();
    if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape) {
        return Err(usage(format!(
            "image {} is {}x{} but the model expects {}x{}",
            bad.id,
            bad.image.height(),
            bad.image.width(),
            shape.height,
            shape.width
        )));
    }
    let strategy = match mask {
        None => Some(cfg.masks()?),
        Some(MaskKind::None) => None,
        Some(MaskKind::Central) => Some(MaskStrategy::Central {
            fraction: cfg.mask_fraction,
        }),
        Some(MaskKind::RandomBlocks) => Some(cfg.strategy_named("random_blocks")?),
    };
    let (h, w) = (shape.height, shape.width);
    let out = cfg.output_dir("inpaint");
    cfg.write_resolved(&out, command_line)?;

    let written: Vec<(String, f64)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<(String, f64)> {
            let m = match &strategy {
                None => Mask::empty(h, w),
                Some(st) => st.sample(h, w, &mut stream_rng(mask_seed, i as u64))?,
            };
            let p = model.predict(&s.image, &m)?;
            // A single encoder has no coarse stage; its column shows the
            // final composite.
            let coarse = if p.coarse.is_some() {
                &p.input
            } else {
                &p.result
            };
            let sheet = hstack(&[&s.image, &p.masked, coarse, &p.result])?;
            let name = format!("{:04}_{}", i, s.id);
            save_png(&sheet, &out.join(format!("{name}.png")))?;
            m.save_png(&out.join(format!("{name}.mask.png")))?;
            Ok((name, coverage(&m)))
        })
        .collect::<Result<_>>()?;
    for (name, cov) in &written {
        println!("{name}.png  coverage {cov:.3}");
    }
    println!(
        "wrote {} comparison sheets ({} model) to {}",
        written.len(),
        model.kind(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
