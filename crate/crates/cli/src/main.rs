use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a4dg::anchor::write_ledger_csv;
use a4dg::eval::evaluate;
use a4dg::io::checkpoint::{load_checkpoint, save_checkpoint};
use a4dg::io::dataset::SceneDataset;
use a4dg::render::{render_cached, RenderConfig};
use a4dg::spawn::build_inference_cache;
use a4dg::synth::{generate_scene, SynthSpec};
use a4dg::temporal::{MotionModel, OpacityModel};
use a4dg::train::{write_log_csv, GrowingMode, TrainConfig, Trainer};
use a4dg::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "a4dg", version, about = "Anchor-compressed 4D Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Synth {
        /// TOML scene description; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a scene and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Render one camera at one frame.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset supplying the cameras.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the dataset's test camera.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train with dynamic-aware and naive growing and dump gradient ledgers.
    AblateGrowing {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GrowingArg {
    DynamicAware,
    Naive,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Linear,
    Polynomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpacityArg {
    Generalized,
    Gaussian4dgs,
}

#[derive(Args)]
struct TrainOpts {
    /// TOML training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    growing: Option<GrowingArg>,
    #[arg(long, value_enum)]
    motion: Option<MotionArg>,
    #[arg(long, value_enum)]
    opacity: Option<OpacityArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(g) = self.growing {
            cfg.growing = match g {
                GrowingArg::DynamicAware => GrowingMode::DynamicAware,
                GrowingArg::Naive => GrowingMode::Naive,
                GrowingArg::Off => GrowingMode::Off,
            };
        }
        if let Some(m) = self.motion {
            cfg.motion = match m {
                MotionArg::Linear => MotionModel::Linear,
                MotionArg::Polynomial => MotionModel::Polynomial,
            };
        }
        if let Some(o) = self.opacity {
            cfg.opacity = match o {
                OpacityArg::Generalized => OpacityModel::Generalized,
                OpacityArg::Gaussian4dgs => OpacityModel::Gaussian4dgs,
            };
        }
        cfg.gamma = self.gamma.unwrap_or(cfg.gamma);
        cfg.beta = self.beta.unwrap_or(cfg.beta);
        cfg.k = self.k.unwrap_or(cfg.k);
        cfg.iterations = self.iters.unwrap_or(cfg.iterations);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| std::io::Write::flush(&mut w)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(data: &SceneDataset, cfg: TrainConfig, out: &Path, log_path: Option<&Path>, ledger_path: Option<&Path>) -> Result<()> {
    let total = cfg.iterations;
    let mut trainer = Trainer::new(data, cfg.clone())?;
    let mut first_growth = None;
    while trainer.iteration() < total {
        let rec = trainer.step()?;
        if rec.iteration % 100 == 0 || rec.iteration == total {
            log::info!(
                "iteration {}/{}: loss {:.5}, {} anchors",
                rec.iteration,
                total,
                rec.loss.total,
                rec.anchors
            );
        }
        if first_growth.is_none() && !trainer.growth_snapshot().is_empty() {
            first_growth = Some(trainer.growth_snapshot().to_vec());
        }
    }
    if let Some(p) = log_path {
        write_with(p, |w| write_log_csv(w, trainer.history()))?;
    }
    if let Some(p) = ledger_path {
        let entries = first_growth.unwrap_or_else(|| trainer.ledger().entries());
        write_with(p, |w| write_ledger_csv(&entries, w))?;
    }
    let fin = trainer.finalize();
    let report = save_checkpoint(&fin.scene, out)?;
    log::info!(
        "wrote {} ({} anchors, {} bytes, {} pruned)",
        out.display(),
        report.n_anchors,
        report.bytes_total,
        fin.pruned.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => toml::from_str(&read_text(&p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => SynthSpec::default(),
            };
            let (data, _) = generate_scene(&spec)?;
            data.save(&out)?;
            log::info!(
                "wrote {} cameras × {} frames to {}",
                data.cameras.len(),
                data.frame_count,
                out.display()
            );
        }
        Command::Train { data, out, log, opts } => {
            let cfg = opts.resolve()?;
            let data = SceneDataset::load(&data)?;
            train(&data, cfg, &out, log.as_deref(), None)?;
        }
        Command::Render {
            ckpt,
            data,
            camera,
            frame,
            out,
        } => {
            let scene = load_checkpoint(&ckpt)?;
            let data = SceneDataset::load(&data)?;
            let cam = data
                .cameras
                .get(camera)
                .ok_or_else(|| Error::Data(format!("camera {camera} out of range ({} cameras)", data.cameras.len())))?;
            if frame >= data.frame_count {
                return Err(Error::Data(format!("frame {frame} out of range ({} frames)", data.frame_count)));
            }
            let cfg = RenderConfig {
                background: data.background,
                ..RenderConfig::default()
            };
            let cache = build_inference_cache(&scene);
            let out_img = render_cached(&scene, &cache, cam, data.time(frame), &cfg)?;
            a4dg::io::image_io::save_png(&out, &out_img.image)?;
        }
        Command::Eval { ckpt, data, report } => {
            let scene = load_checkpoint(&ckpt)?;
            let data = SceneDataset::load(&data)?;
            let r = evaluate(&scene, &data, &RenderConfig::default())?;
            write_with(&report, |w| r.write_csv(w))?;
            println!("{}", a4dg::eval::REPORT_HEADER);
            println!("{}", r.csv_row());
        }
        Command::AblateGrowing { data, out, opts } => {
            let base = opts.resolve()?;
            let dataset = SceneDataset::load(&data)?;
            println!("mode,{}", a4dg::eval::REPORT_HEADER);
            for (name, mode) in [("dynamic_aware", GrowingMode::DynamicAware), ("naive", GrowingMode::Naive)] {
                let cfg = TrainConfig {
                    growing: mode,
                    ..base.clone()
                };
                let ckpt = out.join(format!("{name}.a4dg"));
                train(
                    &dataset,
                    cfg,
                    &ckpt,
                    Some(&out.join(format!("log_{name}.csv"))),
                    Some(&out.join(format!("grad_{name}.csv"))),
                )?;
                let scene = load_checkpoint(&ckpt)?;
                let r = evaluate(&scene, &dataset, &base.render)?;
                write_with(&out.join(format!("eval_{name}.csv")), |w| r.write_csv(w))?;
                println!("{name},{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::NumericalAbort(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
