use std::process::ExitCode;

use anyhow::Result;
use cce_core::cascade::fixed_masks;
use cce_core::masking::coverage;

use crate::config::ExperimentConfig;

pub fn mask_preview(
    cfg: &ExperimentConfig,
    count: usize,
    seed: u64,
    eval: bool,
    command_line: &str,
) -> Result<ExitCode> {
    let strategy = if eval {
        cfg.eval_masks()?
    } else {
        cfg.masks()?
    };
    let size = cfg.image_size;
    let masks = fixed_masks(&strategy, count, size, size, seed)?;
    let out = cfg.output_dir("mask-preview");
    cfg.write_resolved(&out, command_line)?;
    let mut total = 0.0;
    let mut max: f64 = 0.0;
    for (i, m) in masks.iter().enumerate() {
        let name = format!("mask_{i:04}.png");
        m.save_png(&out.join(&name))?;
        let c = coverage(m);
        total += c;
        max = max.max(c);
        println!("{name}  coverage {c:.4}");
    }
    println!(
        "{} {} masks ({size}x{size}): mean coverage {:.4}, max {:.4}",
        masks.len(),
        strategy.name(),
        if masks.is_empty() {
            0.0
        } else {
            total / masks.len() as f64
        },
        max
    );
    Ok(ExitCode::SUCCESS)
}
