//! Trains the default synthetic scene once per growing mode and prints
//! held-out metrics.
//!
//! `cargo run --release --example desk_ablation -- [iterations] [modes...]`
//!
//! `DESK_CONFIG` may hold TOML overrides of the training configuration.

use std::time::Instant;

use a4dg::eval::evaluate;
use a4dg::synth::{generate_scene, SynthSpec};
use a4dg::train::{GrowingMode, TrainConfig, Trainer};

fn main() -> a4dg::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().map(|s| s.parse().expect("iteration count")).unwrap_or(5000);
    let mut modes: Vec<GrowingMode> = args.map(|s| s.parse()).collect::<a4dg::Result<_>>()?;
    if modes.is_empty() {
        modes = vec![GrowingMode::DynamicAware, GrowingMode::Naive, GrowingMode::Off];
    }
    let spec = match std::env::var("DESK_SPEC") {
        Ok(text) => toml::from_str(&text).map_err(|e| a4dg::Error::Config(e.to_string()))?,
        Err(_) => SynthSpec::default(),
    };
    let (data, truth) = generate_scene(&spec)?;
    let diag = std::env::var("DESK_DIAG").is_ok();
    for mode in modes {
        let base = match std::env::var("DESK_CONFIG") {
            Ok(text) => TrainConfig::from_toml(&text)?,
            Err(_) => TrainConfig::default(),
        };
        let cfg = TrainConfig {
            iterations,
            growing: mode,
            ..base
        };
        let start = Instant::now();
        let mut trainer = Trainer::new(&data, cfg.clone())?;
        let mut window = 0.0;
        while trainer.iteration() < iterations {
            let r = &trainer.step()?;
            if diag && r.grown > 0 {
                let snap = trainer.growth_snapshot();
                let th = cfg.growth.threshold;
                let w = snap.iter().filter(|(_, e)| e.weighted_mean() > th).count();
                let n = snap.iter().filter(|(_, e)| e.naive_mean() > th).count();
                let mut wq: Vec<f64> = snap.iter().map(|(_, e)| e.weighted_mean()).collect();
                wq.sort_by(f64::total_cmp);
                let anchors = trainer.scene().anchors().as_slice();
                let new = &anchors[anchors.len() - r.grown..];
                let near = new
                    .iter()
                    .filter(|a| {
                        let p = nalgebra::Vector3::new(a.position[0], a.position[1], a.position[2]);
                        truth.dynamic.iter().any(|b| a4dg::synth::path_distance(b, &p) < 0.3)
                    })
                    .count();
                println!(
                    "  grow @{}: +{} ({} near dynamic paths); above threshold weighted {w} naive {n}; weighted p50 {:.2e} p99 {:.2e} max {:.2e}",
                    r.iteration,
                    r.grown,
                    near,
                    wq[wq.len() / 2],
                    wq[wq.len() * 99 / 100],
                    wq[wq.len() - 1]
                );
            }
            window += r.loss.total;
            if r.iteration % 250 == 0 {
                println!(
                    "{mode:?} it {:5} loss {:.4} anchors {:4} splats {:4} {:.1}s",
                    r.iteration,
                    window / 250.0,
                    r.anchors,
                    r.gaussians_rendered,
                    start.elapsed().as_secs_f64()
                );
                window = 0.0;
            }
        }
        let fin = trainer.finalize();
        let report = evaluate(&fin.scene, &data, &cfg.render)?;
        println!("{mode:?}: {} ({:.1}s)", report.csv_row(), start.elapsed().as_secs_f64());
    }
    Ok(())
}
