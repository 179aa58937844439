//! Data, training, checkpointing and evaluation through the public API.

use cce_core::cascade::{
    fixed_masks, held_out_loss, read_model, train_baseline, train_stage1, train_stage2,
    write_cascade, CascadeCheckpoint, FrozenStage, Inpainter, StageSetup,
};
use cce_core::imaging::{dataset_mean_color, read_dataset, synth_dataset, write_dataset};
use cce_core::masking::MaskStrategy;
use cce_core::metric::{collect_latents, evaluate, EvalProtocol};
use cce_core::nn::{read_checkpoint, write_checkpoint, TrainConfig};
use cce_core::Image;

fn setup(fill: Vec<f64>) -> StageSetup {
    StageSetup {
        masks: MaskStrategy::Central { fraction: 0.25 },
        fill,
        channels: vec![4, 8],
        disc_channels: vec![4],
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn cascade_and_baseline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(40, 16, 5).unwrap().holdout(8).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!((ds.train.len(), ds.val.len()), (32, 8));

    let images: Vec<Image> = ds.train.iter().map(|s| s.image.clone()).collect();
    let st = setup(dataset_mean_color(&ds).unwrap());
    let cfg = config();
    let mut epochs = 0;
    let s1 = train_stage1(&images, &st, &cfg, &mut |_| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, 3);
    let s1_path = dir.path().join("s1.cepk");
    write_checkpoint(&s1_path, &s1).unwrap();
    let before = std::fs::read(&s1_path).unwrap();

    let frozen = FrozenStage::read(&s1_path).unwrap();
    let (model, s2) = train_stage2(frozen.clone(), &images, &st, &cfg, &mut |_| Ok(())).unwrap();
    assert_eq!(std::fs::read(&s1_path).unwrap(), before);
    assert_eq!(model.stage1.bytes(), &before[..]);
    let ccas = dir.path().join("m.ccas");
    write_cascade(&ccas, &CascadeCheckpoint::new(frozen, s2).unwrap()).unwrap();

    let base = train_baseline(&images, &st, &cfg, &mut |_| Ok(())).unwrap();
    let base_path = dir.path().join("b.cepk");
    write_checkpoint(&base_path, &base).unwrap();
    // Parameters are stored as f32, so compare the serialized form.
    assert_eq!(
        read_checkpoint(&base_path).unwrap().to_bytes().unwrap(),
        std::fs::read(&base_path).unwrap()
    );

    let val: Vec<Image> = ds.val.iter().map(|s| s.image.clone()).collect();
    let masks = fixed_masks(&st.masks, val.len(), 16, 16, 0).unwrap();
    let protocol = EvalProtocol {
        masks_per_image: 6,
        images: 8,
        seed: 1,
        ..EvalProtocol::for_size(16, 16)
    };
    for path in [&ccas, &base_path] {
        let m = read_model(path).unwrap();
        let loss = held_out_loss(|i, k| Ok(m.predict(i, k)?.output), &val, &masks).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let sets = collect_latents(&ds.val, &protocol, |i, k, _| m.encode(i, k)).unwrap();
        let a = evaluate(&sets, m.latent_dim().unwrap(), &protocol).unwrap();
        let again = collect_latents(&ds.val, &protocol, |i, k, _| m.encode(i, k)).unwrap();
        assert_eq!(
            a,
            evaluate(&again, m.latent_dim().unwrap(), &protocol).unwrap()
        );
        assert!(a.nsd_mean >= 0.0 && a.nsd_mean.is_finite());
        assert_eq!(a.latent_dim, 128);
    }
    assert!(matches!(read_model(&ccas).unwrap(), Inpainter::Cascade(_)));
    assert!(matches!(
        read_model(&base_path).unwrap(),
        Inpainter::Single { .. }
    ));
}

#[test]
fn training_is_reproducible() {
    let ds = synth_dataset(16, 16, 2).unwrap();
    let images: Vec<Image> = ds.train.iter().map(|s| s.image.clone()).collect();
    let st = setup(vec![0.0; 3]);
    let run = || {
        train_baseline(&images, &st, &config(), &mut |_| Ok(()))
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    assert_eq!(run(), run());
}
