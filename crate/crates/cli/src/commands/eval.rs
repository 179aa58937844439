use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cce_core::cascade::read_model;
use cce_core::metric::{
    collect_latents, evaluate, read_latent_dump, read_manifest, write_latent_dump, write_manifest,
    DistortionReport, EvalProtocol, LatentSet, LatentVector,
};
use cce_core::numeric::stream_rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{load_dataset, write_json};
use crate::config::{usage, ExperimentConfig};
use crate::Stub;

pub const LATENT_MANIFEST_FILE: &str = "latents.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Seed offset of the noise stub, kept apart from the protocol's streams.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500;

pub struct EvalInputs {
    pub models: Vec<PathBuf>,
    pub stubs: Vec<Stub>,
    pub stub_dim: usize,
    pub latent_manifests: Vec<PathBuf>,
}

/// One evaluated encoder.
struct Entry {
    label: String,
    source: String,
    sets: Vec<LatentSet>,
    dim: usize,
    protocol: EvalProtocol,
    /// Latents were read from dumps, so none are written.
    from_dumps: bool,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    source: &'a str,
    summary: String,
    report: &'a DistortionReport,
}

fn unique_label(base: &str, taken: &mut BTreeSet<String>) -> String {
    let mut label = base.to_string();
    let mut i = 2;
    while !taken.insert(label.clone()) {
        label = format!("{base}-{i}");
        i += 1;
    }
    label
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn stub_sets(
    stub: Stub,
    dim: usize,
    pool: &[cce_core::imaging::Sample],
    protocol: &EvalProtocol,
) -> Result<Vec<LatentSet>> {
    let constant = LatentVector((0..dim).map(|i| (i as f64 * 0.37).sin()).collect());
    Ok(collect_latents(pool, protocol, |_, _, id| {
        Ok(match stub {
            Stub::Constant => constant.clone(),
            Stub::Noise => {
                let stream = (id.image * protocol.masks_per_image + id.mask) as u64;
                let mut rng = stream_rng(protocol.seed ^ NOISE_STREAM, stream);
                LatentVector((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            }
        })
    })?)
}

fn dump_sets(dir: &Path, sets: &[LatentSet]) -> Result<()> {
    let latents = dir.join("latents");
    fs::create_dir_all(&latents).with_context(|| format!("creating {}", latents.display()))?;
    let paths: Vec<PathBuf> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| latents.join(format!("{i:04}_{}.ltnt", s.image_id)))
        .collect();
    for (s, p) in sets.iter().zip(&paths) {
        write_latent_dump(p, s)?;
    }
    write_manifest(&dir.join(LATENT_MANIFEST_FILE), &paths)?;
    Ok(())
}

pub fn eval_nsd(
    cfg: &ExperimentConfig,
    inputs: &EvalInputs,
    command_line: &str,
) -> Result<ExitCode> {
    if inputs.models.is_empty() && inputs.stubs.is_empty() && inputs.latent_manifests.is_empty() {
        return Err(usage(
            "nothing to evaluate: pass --model, --stub or --latent-manifest",
        ));
    }
    if inputs.stub_dim == 0 {
        return Err(usage("--stub-dim must be positive"));
    }
    let protocol = cfg.protocol()?;
    let out = cfg.output_dir("eval-nsd");
    cfg.write_resolved(&out, command_line)?;
    let mut taken = BTreeSet::new();
    let mut entries = Vec::new();

    let needs_pool = !inputs.models.is_empty() || !inputs.stubs.is_empty();
    let ds = if needs_pool {
        Some(load_dataset(cfg)?)
    } else {
        None
    };
    let pool = ds
        .as_ref()
        .map(|d| if d.val.is_empty() { &d.train } else { &d.val })
        .map_or(&[][..], |v| v.as_slice());

    for path in &inputs.models {
        let model =
            read_model(path).with_context(|| format!("reading model {}", path.display()))?;
        let shape = model.input_shape();
        if shape.height != cfg.image_size || shape.width != cfg.image_size {
            return Err(usage(format!(
                "{} expects {}x{} images but image_size is {}",
                path.display(),
                shape.height,
                shape.width,
                cfg.image_size
            )));
        }
        let sets = collect_latents(pool, &protocol, |img, m, _| model.encode(img, m))
            .with_context(|| format!("encoding with {}", path.display()))?;
        entries.push(Entry {
            label: unique_label(&stem(path), &mut taken),
            source: format!("{} ({})", path.display(), model.kind()),
            dim: model.latent_dim()?,
            sets,
            protocol: protocol.clone(),
            from_dumps: false,
        });
    }
    for &stub in &inputs.stubs {
        let name = match stub {
            Stub::Constant => "stub-constant",
            Stub::Noise => "stub-noise",
        };
        entries.push(Entry {
            label: unique_label(name, &mut taken),
            source: format!("{name} (D={})", inputs.stub_dim),
            sets: stub_sets(stub, inputs.stub_dim, pool, &protocol)?,
            dim: inputs.stub_dim,
            protocol: protocol.clone(),
            from_dumps: false,
        });
    }
    for path in &inputs.latent_manifests {
        let sets = read_manifest(path)?
            .iter()
            .map(|p| read_latent_dump(p))
            .collect::<cce_core::Result<Vec<_>>>()
            .with_context(|| format!("reading latents listed in {}", path.display()))?;
        let first = sets
            .first()
            .ok_or_else(|| usage(format!("{} lists no latent dumps", path.display())))?;
        let dim = first.latents.first().map_or(0, LatentVector::dim);
        entries.push(Entry {
            label: unique_label(&stem(path), &mut taken),
            source: path.display().to_string(),
            protocol: EvalProtocol {
                masks_per_image: first.len(),
                images: sets.len(),
                ..protocol.clone()
            },
            sets,
            dim,
            from_dumps: true,
        });
    }

    if let Some(first) = entries.first() {
        if let Some(other) = entries.iter().find(|e| e.dim != first.dim) {
            return Err(usage(format!(
                "incompatible latent dimensions: {} has D={} but {} has D={}",
                first.label, first.dim, other.label, other.dim
            )));
        }
    }

    let mut reports = Vec::new();
    for e in &entries {
        let report = evaluate(&e.sets, e.dim, &e.protocol)
            .with_context(|| format!("evaluating {}", e.label))?;
        let dir = out.join(&e.label);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if !e.from_dumps {
            dump_sets(&dir, &e.sets)?;
        }
        fs::write(dir.join(REPORT_FILE), report.to_text())?;
        let file = fs::File::create(dir.join(RECORDS_FILE))?;
        report.write_records(std::io::BufWriter::new(file))?;
        reports.push(report);
    }

    let width = entries
        .iter()
        .map(|e| e.label.len())
        .max()
        .unwrap_or(5)
        .max(5);
    println!(
        "{:<width$}  {:>17}  {:>5} {:>4} {:>4}  masks",
        "model", "nsd", "D", "n", "k"
    );
    for (e, r) in entries.iter().zip(&reports) {
        println!(
            "{:<width$}  {:>8.4} ± {:<6.4}  {:>5} {:>4} {:>4}  {}{}",
            e.label,
            r.nsd_mean,
            r.nsd_std,
            r.latent_dim,
            r.masks_per_image,
            r.images,
            r.mask_strategy,
            if r.standardized { ", standardized" } else { "" },
        );
    }
    for (e, r) in entries.iter().zip(&reports) {
        println!("{}: {}", e.label, r.summary_line());
    }
    let rows: Vec<SummaryRow> = entries
        .iter()
        .zip(&reports)
        .map(|(e, r)| SummaryRow {
            label: &e.label,
            source: &e.source,
            summary: r.summary_line(),
            report: r,
        })
        .collect();
    write_json(&out.join(SUMMARY_FILE), &rows)?;
    Ok(ExitCode::SUCCESS)
}
