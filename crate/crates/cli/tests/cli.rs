mod common;

use std::fs;
use std::time::Instant;

use cce_core::cascade::{read_cascade, sha256_hex};
use cce_core::imaging::load_png;
use cce_core::masking::Mask;
use common::{cce, cce_in, p, tree};

const TINY: [&str; 4] = ["--set", "synth_train=8", "--set", "synth_val=4"];

#[test]
fn gen_data_writes_pngs_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        cce(&[
            "gen-data",
            "--out",
            p(out),
            "--set",
            "synth_train=16",
            "--set",
            "synth_val=0",
        ])
        .ok();
    }
    let files = tree(&a);
    assert_eq!(
        files.iter().filter(|(n, _)| n.ends_with(".png")).count(),
        16
    );
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert!(a.join("config.resolved.toml").exists());
    assert_eq!(files, tree(&b));
}

#[test]
fn odd_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = cce(&["gen-data", "--out", p(dir.path()), "--set", "image_size=33"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("even"), "{}", r.stderr);
}

#[test]
fn bad_flags_and_keys_exit_one() {
    assert_eq!(cce(&["train", "--no-such-flag"]).code, 1);
    assert_eq!(cce(&["train", "--set", "bogus_key=1"]).code, 1);
    assert_eq!(cce(&["--help"]).code, 0);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    cce_in(Some(dir.path()), &["mask-preview", "--count", "2"]).ok();
    assert!(dir.path().join("mask-preview/mask_0001.png").exists());
    assert!(dir
        .path()
        .join("mask-preview/config.resolved.toml")
        .exists());
}

#[test]
fn stage_one_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let mut args = vec!["train", "--out", p(&out), "--stages", "1", "--epochs", "1"];
    args.extend(TINY);
    cce(&args).ok();
    assert!(out.join("stage1.cepk").exists());
    assert!(!out.join("cascade.ccas").exists());
    assert!(!out.join("baseline.cepk").exists());
    assert_eq!(
        fs::read_to_string(out.join("stage1.log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn cascade_embeds_the_standalone_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let start = Instant::now();
    let mut args = vec![
        "train",
        "--out",
        p(&out),
        "--stages",
        "1,2",
        "--epochs",
        "1",
    ];
    args.extend(TINY);
    cce(&args).ok();
    assert!(start.elapsed().as_secs() < 60);
    let stage1 = fs::read(out.join("stage1.cepk")).unwrap();
    let cascade = read_cascade(&out.join("cascade.ccas")).unwrap();
    assert_eq!(cascade.manifest.stage1_sha256, sha256_hex(&stage1));
    assert_eq!(cascade.stage1.bytes(), &stage1[..]);

    // Stage 2 alone on the saved stage 1 leaves its bytes untouched.
    let again = dir.path().join("t2");
    let stage1_path = out.join("stage1.cepk");
    let mut args = vec![
        "train",
        "--out",
        p(&again),
        "--stages",
        "2",
        "--stage1",
        p(&stage1_path),
        "--epochs",
        "1",
    ];
    args.extend(TINY);
    cce(&args).ok();
    assert_eq!(fs::read(&stage1_path).unwrap(), stage1);
    let c2 = read_cascade(&again.join("cascade.ccas")).unwrap();
    assert_eq!(c2.stage1.bytes(), &stage1[..]);
    assert_eq!(
        fs::read(again.join("cascade.ccas")).unwrap(),
        fs::read(out.join("cascade.ccas")).unwrap()
    );
}

#[test]
fn stage_two_alone_needs_a_stage_one() {
    let r = cce(&["train", "--stages", "2"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("--stage1"), "{}", r.stderr);
    assert_eq!(cce(&["train", "--stages", "3"]).code, 1);
}

#[test]
fn resolved_config_and_thread_count_reproduce_training() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let mut args = vec![
        "train",
        "--out",
        p(&a),
        "--stages",
        "baseline",
        "--epochs",
        "2",
    ];
    args.extend(TINY);
    cce(&args).ok();
    let b = dir.path().join("b");
    let resolved = a.join("config.resolved.toml");
    cce(&[
        "--threads",
        "1",
        "train",
        "--config",
        p(&resolved),
        "--out",
        p(&b),
        "--stages",
        "baseline",
    ])
    .ok();
    assert_eq!(
        fs::read(a.join("baseline.cepk")).unwrap(),
        fs::read(b.join("baseline.cepk")).unwrap()
    );
}

fn trained(dir: &std::path::Path) -> std::path::PathBuf {
    let out = dir.join("model");
    let mut args = vec![
        "train",
        "--out",
        p(&out),
        "--stages",
        "1,2,baseline",
        "--epochs",
        "1",
    ];
    args.extend(TINY);
    cce(&args).ok();
    out
}

#[test]
fn eval_is_idempotent_and_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let cascade = model.join("cascade.ccas");
    let eval = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "eval-nsd",
            "--out",
            p(&out),
            "--model",
            p(&cascade),
            "--model",
            p(&cascade),
            "--set",
            "eval_masks=10",
        ];
        args.extend(TINY);
        let r = cce(&args).ok();
        (out, r.stdout)
    };
    let (a, stdout) = eval("e1");
    let (b, _) = eval("e2");
    let report = |d: &std::path::Path, label: &str| {
        fs::read_to_string(d.join(label).join("report.txt")).unwrap()
    };
    assert_eq!(report(&a, "cascade"), report(&a, "cascade-2"));
    assert_eq!(tree(&a), tree(&b));
    let line = stdout
        .lines()
        .find(|l| l.starts_with("cascade: nsd = "))
        .unwrap();
    assert!(
        line.contains("± ")
            && line.contains("D=512, n=10, k=4, masks=random_blocks, standardized=no"),
        "{line}"
    );

    // Re-evaluating the written dumps reproduces the report.
    let again = dir.path().join("e3");
    let manifest = a.join("cascade/latents.txt");
    let r = cce(&[
        "eval-nsd",
        "--out",
        p(&again),
        "--latent-manifest",
        p(&manifest),
    ])
    .ok();
    assert!(r.stdout.contains("D=512, n=10, k=4"), "{}", r.stdout);
}

#[test]
fn eval_rejects_mismatched_latent_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let out = dir.path().join("e");
    let stage1 = model.join("stage1.cepk");
    let cascade = model.join("cascade.ccas");
    // A 16x16 stage-1 model does not fit the 32x32 pool.
    let mut args = vec!["eval-nsd", "--out", p(&out), "--model", p(&stage1)];
    args.extend(TINY);
    assert_eq!(cce(&args).code, 1);
    let mut args = vec![
        "eval-nsd",
        "--out",
        p(&out),
        "--model",
        p(&cascade),
        "--stub",
        "constant",
        "--stub-dim",
        "64",
    ];
    args.extend(TINY);
    let r = cce(&args);
    assert_eq!(r.code, 1);
    assert!(
        r.stderr.contains("incompatible latent dimensions"),
        "{}",
        r.stderr
    );
}

fn nsd_of(stdout: &str, label: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(&format!("{label}: nsd = ")))
        .unwrap_or_else(|| panic!("no {label} line in {stdout}"));
    line.split_whitespace().nth(3).unwrap().parse().unwrap()
}

#[test]
fn stub_encoders_hit_the_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let r = cce(&[
        "eval-nsd",
        "--out",
        p(&out),
        "--stub",
        "constant",
        "--stub",
        "noise",
        "--standardize",
        "--set",
        "synth_train=0",
        "--set",
        "synth_val=50",
        "--set",
        "eval_images=50",
    ])
    .ok();
    assert_eq!(nsd_of(&r.stdout, "stub-constant"), 0.0);
    let noise = nsd_of(&r.stdout, "stub-noise");
    assert!((noise - 1.0).abs() < 0.05, "{noise}");
    assert!(out.join("stub-noise/latents.txt").exists());
    assert!(out.join("stub-noise/records.jsonl").exists());
}

/// Splits a four-column sheet into its columns.
fn columns(sheet: &cce_core::Image) -> Vec<cce_core::Image> {
    let w = sheet.width() / 4;
    (0..4)
        .map(|c| {
            cce_core::Image::from_fn(cce_core::Shape::new(3, sheet.height(), w), |ch, y, x| {
                sheet.get(ch, y, c * w + x)
            })
        })
        .collect()
}

#[test]
fn inpaint_sheets_keep_context() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    for (file, kind) in [("cascade.ccas", "cascade"), ("baseline.cepk", "single")] {
        let out = dir.path().join(format!("inpaint-{kind}"));
        let model_path = model.join(file);
        let r = cce(&[
            "inpaint",
            "--out",
            p(&out),
            "--model",
            p(&model_path),
            "--count",
            "10",
            "--mask",
            "random-blocks",
            "--set",
            "synth_train=0",
            "--set",
            "synth_val=12",
        ])
        .ok();
        assert!(r
            .stdout
            .contains(&format!("wrote 10 comparison sheets ({kind} model)")));
        let sheets: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|f| {
                f.to_string_lossy().ends_with("png") && !f.to_string_lossy().ends_with(".mask.png")
            })
            .collect();
        assert_eq!(sheets.len(), 10);
        for sheet in sheets {
            let cols = columns(&load_png(&sheet).unwrap());
            let mask = Mask::load_png(&sheet.with_extension("mask.png")).unwrap();
            assert!(mask.missing_count() > 0);
            for y in 0..32 {
                for x in 0..32 {
                    if mask.is_missing(y, x) {
                        continue;
                    }
                    for c in 0..3 {
                        let v = cols[0].get(c, y, x);
                        assert!(cols.iter().all(|col| col.get(c, y, x) == v));
                    }
                }
            }
        }
    }
}

#[test]
fn inpaint_with_empty_mask_returns_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let out = dir.path().join("ip");
    let cascade = model.join("cascade.ccas");
    cce(&[
        "inpaint",
        "--out",
        p(&out),
        "--model",
        p(&cascade),
        "--count",
        "3",
        "--mask",
        "none",
    ])
    .ok();
    for e in fs::read_dir(&out).unwrap() {
        let f = e.unwrap().path();
        let name = f.to_string_lossy().into_owned();
        if name.ends_with(".png") && !name.ends_with(".mask.png") {
            let cols = columns(&load_png(&f).unwrap());
            assert_eq!(cols[3], cols[0], "{name}");
        }
    }
}

#[test]
fn inpaint_rejects_wrong_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let stage1 = model.join("stage1.cepk");
    let out = dir.path().join("ip");
    let r = cce(&["inpaint", "--out", p(&out), "--model", p(&stage1)]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("expects 16x16"), "{}", r.stderr);
}

#[derive(serde::Deserialize)]
struct Component {
    name: String,
    max_rel_error: f64,
    layers: Vec<Layer>,
}

#[derive(serde::Deserialize)]
struct Layer {
    name: String,
}

#[test]
fn grad_check_passes_and_covers_every_layer_type() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    cce(&["grad-check", "--report", p(&report)]).ok();
    let comps: Vec<Component> =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for c in &comps {
        assert!(c.max_rel_error < 1e-6, "{}: {}", c.name, c.max_rel_error);
    }
    let names: Vec<&str> = comps.iter().map(|c| c.name.as_str()).collect();
    for spec in [
        cce_core::nn::NetworkSpec::context_encoder(32, &[8, 16, 32]).unwrap(),
        cce_core::nn::NetworkSpec::discriminator(32, &[8, 16]).unwrap(),
    ] {
        for l in &spec.layers {
            let want = format!("layer/{}", l.name());
            assert!(names.contains(&want.as_str()), "{want} missing");
        }
    }
    for want in [
        "loss/joint_generator",
        "loss/joint_discriminator",
        "cascade/rec",
        "cascade/adv_generator",
        "cascade/adv_discriminator",
    ] {
        assert!(names.contains(&want), "{want} missing");
    }
    assert!(comps.iter().all(|c| !c.layers.is_empty()));
    assert!(comps
        .iter()
        .flat_map(|c| &c.layers)
        .any(|l| l.name == "channelwise_fc"));
}

#[test]
fn grad_check_mutation_exits_three() {
    let r = cce(&["grad-check", "--mutate", "0"]);
    assert_eq!(r.code, 3, "{}", r.stdout);
    assert!(r.stdout.contains("FAIL"));
}

#[test]
fn mask_preview_respects_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let r = cce(&[
        "mask-preview",
        "--out",
        p(dir.path()),
        "--count",
        "20",
        "--set",
        "mask=random_blocks",
    ])
    .ok();
    for line in r.stdout.lines().filter(|l| l.starts_with("mask_")) {
        let c: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert!(c <= 0.25, "{line}");
    }
    assert!(dir.path().join("mask_0019.png").exists());
}
