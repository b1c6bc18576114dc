use std::hint::black_box;

use a4dg::io::dataset::SceneDataset;
use a4dg::loss::LossWeights;
use a4dg::par::Execution;
use a4dg::render::{render, render_backward, RenderConfig};
use a4dg::scene::Scene;
use a4dg::spawn::{spawn_scene, spawn_scene_backward};
use a4dg::synth::{generate_scene, SynthSpec};
use a4dg::train::{loss_and_grads, TrainConfig, Trainer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup() -> (SceneDataset, Scene) {
    let spec = SynthSpec {
        width: 96,
        height: 96,
        ..SynthSpec::default()
    };
    let (data, _) = generate_scene(&spec).unwrap();
    let scene = Trainer::new(&data, TrainConfig::default()).unwrap().scene().clone();
    (data, scene)
}

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn bench(c: &mut Criterion) {
    let (data, scene) = setup();
    let cam = &data.cameras[1];
    let gt = &data.images[1][12];
    let t = data.time(12);

    let mut g = c.benchmark_group("spawn");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| spawn_scene(black_box(&scene), &cam.center(), None, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("render");
    for (name, exec) in MODES {
        let cfg = RenderConfig {
            execution: exec,
            ..RenderConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render(black_box(&scene), cam, t, &cfg).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("backward");
    for (name, exec) in MODES {
        let cfg = RenderConfig {
            execution: exec,
            ..RenderConfig::default()
        };
        let step = loss_and_grads(&scene, cam, t, gt, &LossWeights::default(), &cfg).unwrap();
        let d_image = a4dg::image::Image::filled(cam.width, cam.height, &[1e-3, -2e-3, 1e-3]);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let bw = render_backward(&step.output.frame, &scene, &d_image, &cfg).unwrap();
                spawn_scene_backward(&scene, &cam.center(), &bw.gaussian_grads, exec)
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for (name, exec) in MODES {
        let cfg = RenderConfig {
            execution: exec,
            ..RenderConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_grads(&scene, cam, t, gt, &LossWeights::default(), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
