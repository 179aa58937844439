use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use cce_core::cascade::{
    cascade_adv_grad_check, cascade_rec_grad_check, CascadeModel, FrozenStage,
};
use cce_core::masking::{apply_mask, central_mask, random_blocks_mask, RandomBlocks};
use cce_core::nn::{
    grad_check as check_network, joint_grad_check, layer_type_suite, masked_rec_loss, Checkpoint,
    GradCheckConfig, GradCheckReport, ModelMeta, Network, NetworkSpec, TrainConfig,
};
use cce_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::write_json;

/// Largest relative error accepted before exiting with status 3.
pub const THRESHOLD: f64 = 1e-5;
pub const EXIT_THRESHOLD: u8 = 3;

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    name: String,
    checked: usize,
    skipped: usize,
    max_rel_error: f64,
}

#[derive(Serialize)]
struct Component {
    name: String,
    max_rel_error: f64,
    pass: bool,
    layers: Vec<LayerRow>,
}

fn component(name: &str, r: GradCheckReport) -> Component {
    let max = r.max_rel_error();
    Component {
        name: name.to_string(),
        max_rel_error: max,
        pass: max < THRESHOLD,
        layers: r
            .layers
            .into_iter()
            .map(|l| LayerRow {
                layer: l.layer,
                name: l.name,
                checked: l.checked,
                skipped: l.skipped,
                max_rel_error: l.max_rel_error,
            })
            .collect(),
    }
}

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Every check: each layer type, the masked reconstruction loss, the joint
/// loss and both cascade losses, on small default-architecture networks.
fn components(cfg: &GradCheckConfig) -> Result<Vec<Component>> {
    let mut out: Vec<Component> = layer_type_suite(cfg)?
        .into_iter()
        .map(|(name, r)| component(&format!("layer/{name}"), r))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = 8;
    let gen = Network::init(NetworkSpec::context_encoder(size, &[3, 4])?, &mut rng)?;
    let disc = Network::init(NetworkSpec::discriminator(size, &[4])?, &mut rng)?;
    let target = rand_tensor(gen.spec.input, &mut rng);
    let mask = central_mask(size, size, 0.25)?;
    let input = apply_mask(&target, &mask, &[0.0; 3])?;

    let rec = check_network(
        &gen.spec,
        &gen.params,
        &input,
        |o| masked_rec_loss(&target, o, &mask),
        cfg,
    )?;
    out.push(component("loss/masked_rec", rec));

    let train = TrainConfig {
        lambda_adv: 0.3,
        adversarial_enabled: true,
        ..TrainConfig::default()
    };
    let (g, d) = joint_grad_check(&gen, &disc, &input, &target, &mask, &train, cfg)?;
    out.push(component("loss/joint_generator", g));
    out.push(component("loss/joint_discriminator", d));

    let s1 = Network::init(NetworkSpec::context_encoder(size / 2, &[3])?, &mut rng)?;
    let frozen = FrozenStage::from_checkpoint(&Checkpoint {
        network: s1,
        config: TrainConfig::default(),
        meta: ModelMeta {
            normalization: cce_core::imaging::NORMALIZATION.into(),
            fill: vec![0.0; 3],
            masks: cce_core::masking::MaskStrategy::Central { fraction: 0.25 },
        },
        seed: cfg.seed,
    })?;
    let model = CascadeModel::new(frozen, gen.clone(), vec![0.1, -0.2, 0.05])?;
    out.push(component(
        "cascade/rec",
        cascade_rec_grad_check(&model, &target, &mask, cfg)?,
    ));
    let images = vec![target.clone(), rand_tensor(gen.spec.input, &mut rng)];
    let masks = vec![
        mask.clone(),
        random_blocks_mask(size, size, &RandomBlocks::for_size(size, size), &mut rng),
    ];
    let (g, d) = cascade_adv_grad_check(&model, &disc, &images, &masks, cfg)?;
    out.push(component("cascade/adv_generator", g));
    out.push(component("cascade/adv_discriminator", d));
    Ok(out)
}

pub fn grad_check(seed: u64, mutate: Option<usize>, report: Option<&Path>) -> Result<ExitCode> {
    let comps = components(&GradCheckConfig {
        seed,
        mutate_layer: mutate,
        ..GradCheckConfig::default()
    })?;
    println!(
        "{:<28} {:>8} {:>8} {:>14}  status",
        "component", "checked", "skipped", "max rel err"
    );
    for c in &comps {
        let checked: usize = c.layers.iter().map(|l| l.checked).sum();
        let skipped: usize = c.layers.iter().map(|l| l.skipped).sum();
        println!(
            "{:<28} {:>8} {:>8} {:>14.3e}  {}",
            c.name,
            checked,
            skipped,
            c.max_rel_error,
            if c.pass { "ok" } else { "FAIL" }
        );
        if !c.pass {
            for l in c.layers.iter().filter(|l| l.max_rel_error >= THRESHOLD) {
                println!(
                    "    layer {} ({}): {:.3e}",
                    l.layer, l.name, l.max_rel_error
                );
            }
        }
    }
    let worst = comps.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (threshold {THRESHOLD:.0e})");
    if let Some(path) = report {
        write_json(path, &comps)?;
    }
    Ok(if comps.iter().all(|c| c.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_THRESHOLD)
    })
}
