use a4dg::eval::evaluate;
use a4dg::io::checkpoint::{decode_checkpoint, encode_checkpoint};
use a4dg::io::dataset::SceneDataset;
use a4dg::optim::LearningRates;
use a4dg::render::{render, render_cached, RenderConfig};
use a4dg::synth::{generate_scene, DynamicBlob, SynthSpec};
use a4dg::train::{write_log_csv, GrowingMode, GrowthConfig, TrainConfig, Trainer};

fn tiny_dataset() -> SceneDataset {
    let spec = SynthSpec {
        cameras: 3,
        width: 16,
        height: 16,
        frames: 5,
        static_blobs: 8,
        points_per_blob: 4,
        dynamic_blobs: vec![DynamicBlob {
            start_frame: 1,
            end_frame: 3,
            waypoints: vec![[0.3, 0.0, 0.0], [-0.3, 0.2, 0.0]],
            color: [0.9, 0.3, 0.1],
            scale: 0.2,
            opacity: 0.9,
        }],
        ..SynthSpec::default()
    };
    generate_scene(&spec).unwrap().0
}

fn config(iterations: u64, growing: GrowingMode) -> TrainConfig {
    TrainConfig {
        iterations,
        growing,
        k: 4,
        feature_dim: 8,
        hidden: 8,
        spatial_voxel: 0.25,
        growth: GrowthConfig {
            start: 5,
            interval: 5,
            until_fraction: 1.0,
            threshold: 0.0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rates_freeze_parameters() {
    let data = tiny_dataset();
    let mut cfg = config(10, GrowingMode::Off);
    cfg.rates = LearningRates::zero();
    let mut trainer = Trainer::new(&data, cfg).unwrap();
    let before = encode_checkpoint(trainer.scene());
    trainer.run(|_| {}).unwrap();
    assert_eq!(encode_checkpoint(trainer.scene()), before);
}

#[test]
fn growing_off_keeps_anchor_count() {
    let data = tiny_dataset();
    let mut trainer = Trainer::new(&data, config(20, GrowingMode::Off)).unwrap();
    let n = trainer.scene().anchors().len();
    trainer.run(|r| assert_eq!(r.grown, 0)).unwrap();
    assert!(trainer.history().iter().all(|r| r.anchors == n));
    assert!(trainer.ledger().entries().iter().all(|(_, e)| e.naive_count == 0));
}

#[test]
fn growing_adds_anchors_and_keeps_training() {
    let data = tiny_dataset();
    for mode in [GrowingMode::DynamicAware, GrowingMode::Naive] {
        let mut trainer = Trainer::new(&data, config(12, mode)).unwrap();
        let n = trainer.scene().anchors().len();
        trainer.run(|_| {}).unwrap();
        let grown: usize = trainer.history().iter().map(|r| r.grown).sum();
        assert!(grown > 0, "{mode:?} never grew");
        assert_eq!(trainer.scene().anchors().len(), n + grown);
        assert!(!trainer.growth_snapshot().is_empty());
    }
}

#[test]
fn same_seed_same_log() {
    let data = tiny_dataset();
    let log = |seed: u64| {
        let mut cfg = config(15, GrowingMode::DynamicAware);
        cfg.seed = seed;
        let mut trainer = Trainer::new(&data, cfg).unwrap();
        trainer.run(|_| {}).unwrap();
        let mut out = Vec::new();
        write_log_csv(&mut out, trainer.history()).unwrap();
        String::from_utf8(out).unwrap()
    };
    let a = log(4);
    assert_eq!(a, log(4));
    assert_ne!(a, log(5));
    assert_eq!(a.lines().count(), 16);
}

#[test]
fn training_lowers_loss() {
    let data = tiny_dataset();
    let mut trainer = Trainer::new(&data, config(200, GrowingMode::Off)).unwrap();
    trainer.run(|_| {}).unwrap();
    let h = trainer.history();
    let mean = |r: &[a4dg::train::IterationRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
    assert!(mean(&h[180..]) < 0.7 * mean(&h[..20]));
}

#[test]
fn finalized_scene_contracts() {
    let data = tiny_dataset();
    let mut trainer = Trainer::new(&data, config(30, GrowingMode::DynamicAware)).unwrap();
    trainer.run(|_| {}).unwrap();
    let fin = trainer.finalize();
    let cfg = RenderConfig {
        background: data.background,
        ..RenderConfig::default()
    };
    for f in 0..data.frame_count {
        let cam = &data.cameras[data.test_camera];
        let a = render(&fin.scene, cam, data.time(f), &cfg).unwrap().image;
        let b = render_cached(&fin.scene, &fin.cache, cam, data.time(f), &cfg).unwrap().image;
        assert_eq!(a, b);
    }
    let bytes = encode_checkpoint(&fin.scene);
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
    let report = evaluate(&fin.scene, &data, &cfg).unwrap();
    assert_eq!(report.storage_bytes, bytes.len() as u64);
    assert_eq!(report.anchors, fin.scene.anchors().len());
    assert!(report.metrics.psnr_full.is_finite());
}
