use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use cce_core::cascade::{
    downscale, fixed_masks, held_out_loss, train_baseline, train_stage1, train_stage2,
    write_cascade, CascadeCheckpoint, CascadeModel, EpochRecord, FrozenStage, Inpainter,
    StageSetup,
};
use cce_core::imaging::dataset_mean_color;
use cce_core::masking::Mask;
use cce_core::nn::{write_checkpoint, Network, NetworkSpec, TrainConfig};
use cce_core::{Image, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{load_dataset, write_json, JsonLines};
use crate::config::{usage, ExperimentConfig};

pub const STAGE1_FILE: &str = "stage1.cepk";
pub const CASCADE_FILE: &str = "cascade.ccas";
pub const BASELINE_FILE: &str = "baseline.cepk";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Default, PartialEq)]
struct Stages {
    stage1: bool,
    stage2: bool,
    baseline: bool,
}

fn parse_stages(s: &str) -> Result<Stages> {
    let mut st = Stages::default();
    for part in s.split(',').map(str::trim) {
        match part {
            "1" => st.stage1 = true,
            "2" => st.stage2 = true,
            "baseline" => st.baseline = true,
            other => {
                return Err(usage(format!(
                    "--stages takes a comma-separated list of 1, 2 and baseline, got {other:?}"
                )))
            }
        }
    }
    Ok(st)
}

/// Held-out masked loss of one trained model, before and after training.
#[derive(Debug, Serialize)]
struct StageSummary {
    name: &'static str,
    file: String,
    resolution: usize,
    untrained_loss: f64,
    trained_loss: f64,
    ratio: f64,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    train_images: usize,
    held_out_images: usize,
    fill: Vec<f64>,
    stages: Vec<StageSummary>,
    stage1_sha256: Option<String>,
}

/// The network `fit` starts from: the first draw of the training seed.
fn untrained(size: usize, setup: &StageSetup, cfg: &TrainConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Network::init(
        NetworkSpec::context_encoder(size, &setup.channels)?,
        &mut rng,
    )?)
}

fn loss_of(model: &Inpainter, images: &[Image], masks: &[Mask]) -> Result<f64> {
    Ok(held_out_loss(
        |img, m| -> cce_core::Result<Tensor> { Ok(model.predict(img, m)?.output) },
        images,
        masks,
    )?)
}

fn run_logged<T>(
    out: &Path,
    name: &str,
    f: impl FnOnce(&mut dyn FnMut(&EpochRecord) -> cce_core::Result<()>) -> cce_core::Result<T>,
) -> Result<(T, f64)> {
    let path = out.join(format!("{name}.log.jsonl"));
    let mut log = JsonLines::create(&path)?;
    let mut io_err = None;
    let start = Instant::now();
    let result = f(&mut |r: &EpochRecord| {
        eprintln!(
            "{name} epoch {:>3}: rec {:.5} adv {:.5} ({:.1}s)",
            r.epoch, r.rec_loss, r.adv_loss, r.wall_seconds
        );
        if let Err(e) = log.push(r) {
            io_err.get_or_insert(e);
        }
        Ok(())
    })
    .with_context(|| format!("training {name}"))?;
    if let Some(e) = io_err {
        return Err(e.context(format!("writing {}", path.display())));
    }
    Ok((result, start.elapsed().as_secs_f64()))
}

fn summary(
    name: &'static str,
    file: &str,
    resolution: usize,
    before: f64,
    after: f64,
    seconds: f64,
) -> StageSummary {
    println!(
        "{name}: held-out masked loss {before:.5} -> {after:.5} (ratio {:.3}, {seconds:.1}s) -> {file}",
        after / before
    );
    StageSummary {
        name,
        file: file.to_string(),
        resolution,
        untrained_loss: before,
        trained_loss: after,
        ratio: after / before,
        seconds,
    }
}

pub fn train(
    cfg: &ExperimentConfig,
    stages: &str,
    stage1_path: Option<&Path>,
    command_line: &str,
) -> Result<ExitCode> {
    let st = parse_stages(stages)?;
    if st.stage2 && !st.stage1 && stage1_path.is_none() {
        return Err(usage("--stages 2 without 1 needs --stage1 PATH"));
    }
    if st.stage1 && stage1_path.is_some() {
        return Err(usage(
            "--stage1 conflicts with training stage 1 in the same run",
        ));
    }
    let ds = load_dataset(cfg)?;
    let out = cfg.output_dir("train");
    cfg.write_resolved(&out, command_line)?;

    let images: Vec<Image> = ds.train.iter().map(|s| s.image.clone()).collect();
    let held: Vec<Image> = if ds.val.is_empty() {
        &ds.train
    } else {
        &ds.val
    }
    .iter()
    .map(|s| s.image.clone())
    .collect();
    let size = cfg.image_size;
    let fill = dataset_mean_color(&ds)?;
    let setup = cfg.stage_setup(fill.clone())?;
    let tcfg = cfg.train_config();
    let masks = fixed_masks(&setup.masks, held.len(), size, size, cfg.eval_seed)?;
    let mut report = TrainSummary {
        train_images: images.len(),
        held_out_images: held.len(),
        fill: fill.clone(),
        stages: Vec::new(),
        stage1_sha256: None,
    };

    let mut stage1 = match stage1_path {
        Some(p) => {
            Some(FrozenStage::read(p).with_context(|| format!("reading stage 1 {}", p.display()))?)
        }
        None => None,
    };
    if st.stage1 {
        let small: Vec<Image> = held
            .iter()
            .map(downscale)
            .collect::<cce_core::Result<_>>()?;
        let small_masks: Vec<Mask> = masks
            .iter()
            .map(Mask::downscale)
            .collect::<cce_core::Result<_>>()?;
        let init = Inpainter::Single {
            network: untrained(size / 2, &setup, &tcfg)?,
            fill: fill.clone(),
        };
        let before = loss_of(&init, &small, &small_masks)?;
        let (ck, secs) = run_logged(&out, "stage1", |log| {
            train_stage1(&images, &setup, &tcfg, log)
        })?;
        write_checkpoint(&out.join(STAGE1_FILE), &ck)?;
        let after = loss_of(
            &Inpainter::from_checkpoint(ck.clone())?,
            &small,
            &small_masks,
        )?;
        report.stages.push(summary(
            "stage1",
            STAGE1_FILE,
            size / 2,
            before,
            after,
            secs,
        ));
        stage1 = Some(FrozenStage::read(&out.join(STAGE1_FILE))?);
    }
    if st.stage2 {
        let frozen = stage1.expect("stage 1 is trained or loaded above");
        report.stage1_sha256 = Some(frozen.sha256());
        let init = Inpainter::Cascade(CascadeModel::new(
            frozen.clone(),
            untrained(size, &setup, &tcfg)?,
            fill.clone(),
        )?);
        let before = loss_of(&init, &held, &masks)?;
        let ((model, ck2), secs) = run_logged(&out, "stage2", |log| {
            train_stage2(frozen.clone(), &images, &setup, &tcfg, log)
        })?;
        let container = CascadeCheckpoint::new(model.stage1.clone(), ck2)?;
        write_cascade(&out.join(CASCADE_FILE), &container)?;
        let after = loss_of(&Inpainter::Cascade(model), &held, &masks)?;
        report
            .stages
            .push(summary("cascade", CASCADE_FILE, size, before, after, secs));
    }
    if st.baseline {
        let init = Inpainter::Single {
            network: untrained(size, &setup, &tcfg)?,
            fill: fill.clone(),
        };
        let before = loss_of(&init, &held, &masks)?;
        let (ck, secs) = run_logged(&out, "baseline", |log| {
            train_baseline(&images, &setup, &tcfg, log)
        })?;
        write_checkpoint(&out.join(BASELINE_FILE), &ck)?;
        let after = loss_of(&Inpainter::from_checkpoint(ck)?, &held, &masks)?;
        report.stages.push(summary(
            "baseline",
            BASELINE_FILE,
            size,
            before,
            after,
            secs,
        ));
    }
    write_json(&out.join(SUMMARY_FILE), &report)?;
    Ok(ExitCode::SUCCESS)
}
