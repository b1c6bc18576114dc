//! Joint optimization of anchors and MLPs with periodic anchor growing.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{init_anchors, AnchorInit, GaussianKey, GradientLedger, GrowthStatistic, LedgerEntry, VoxelGrid4D};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::io::dataset::SceneDataset;
use crate::loss::{frame_loss, LossTerms, LossWeights};
use crate::optim::{AdamConfig, LearningRates, OptimizerState};
use crate::render::{render, render_backward, BackwardOutput, RenderConfig, RenderOutput};
use crate::scene::{ModelConfig, Scene};
use crate::spawn::{base_opacities, build_inference_cache, spawn_scene_backward, InferenceCache, MlpInit, MlpStack, ParamGrads};
use crate::temporal::{MotionModel, OpacityModel, ShapeExponent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowingMode {
    /// Opacity- and coverage-weighted gradient mean.
    DynamicAware,
    /// Plain gradient mean over every iteration a Gaussian was rasterized.
    Naive,
    Off,
}

impl GrowingMode {
    pub fn statistic(self) -> Option<GrowthStatistic> {
        match self {
            GrowingMode::DynamicAware => Some(GrowthStatistic::Weighted),
            GrowingMode::Naive => Some(GrowthStatistic::Naive),
            GrowingMode::Off => None,
        }
    }
}

impl std::str::FromStr for GrowingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic_aware" => Ok(GrowingMode::DynamicAware),
            "naive" => Ok(GrowingMode::Naive),
            "off" => Ok(GrowingMode::Off),
            _ => Err(Error::Config(format!("unknown growing mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthConfig {
    /// First iteration at which anchors may grow.
    pub start: u64,
    pub interval: u64,
    /// No growing after this fraction of the iterations.
    pub until_fraction: f64,
    /// Threshold on the growth statistic, in pixels of screen-space gradient
    /// per unit loss.
    pub threshold: f64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            start: 500,
            interval: 100,
            until_fraction: 0.5,
            threshold: 2e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub max_points: usize,
    /// Frame whose time the initial anchors are placed at.
    pub t0_frame: usize,
    pub opacity_bias: f64,
    /// Initial Gaussian scale; the spatial voxel size when absent.
    pub scale: Option<f64>,
    /// Initial inverse temporal scale, in inverse normalized time.
    pub inv_temporal_scale: f64,
    pub out_scale: f64,
    pub offset_cells: f64,
    pub grow_offset_cells: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        let a = AnchorInit::default();
        let m = MlpInit::default();
        InitConfig {
            max_points: a.max_points,
            t0_frame: 0,
            opacity_bias: m.opacity_bias,
            scale: None,
            inv_temporal_scale: m.inv_temporal_scale,
            out_scale: m.out_scale,
            offset_cells: a.init_offset_cells,
            grow_offset_cells: a.grow_offset_cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub gamma: f64,
    pub beta: f64,
    pub k: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub spatial_voxel: f64,
    /// The frame interval when absent.
    pub temporal_voxel: Option<f64>,
    pub growing: GrowingMode,
    pub motion: MotionModel,
    pub opacity: OpacityModel,
    pub growth: GrowthConfig,
    /// Remove all-negative-opacity anchors every this many iterations.
    pub prune_every: Option<u64>,
    pub rates: LearningRates,
    pub adam: AdamConfig,
    pub init: InitConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5_000,
            seed: 0,
            loss: LossWeights::default(),
            gamma: 1.0,
            beta: 2.0,
            k: 10,
            feature_dim: 32,
            hidden: 32,
            spatial_voxel: 0.1,
            temporal_voxel: None,
            growing: GrowingMode::DynamicAware,
            motion: MotionModel::Linear,
            opacity: OpacityModel::Generalized,
            growth: GrowthConfig::default(),
            prune_every: None,
            rates: LearningRates::default(),
            adam: AdamConfig::default(),
            init: InitConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings for real captures.
    pub fn paper() -> Self {
        TrainConfig {
            iterations: 120_000,
            spatial_voxel: 0.001,
            growth: GrowthConfig {
                start: 1_500,
                interval: 100,
                until_fraction: 0.5,
                threshold: 2e-4,
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        for (name, v) in [("lambda_ssim", self.loss.lambda_ssim), ("lambda_vol", self.loss.lambda_vol)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.k == 0 || self.feature_dim == 0 || self.hidden == 0 || self.hidden > crate::mlp::Mlp::MAX_HIDDEN {
            return bad("k, feature_dim and hidden must be positive (hidden at most 64)".into());
        }
        if !(self.spatial_voxel > 0.0) || self.temporal_voxel.is_some_and(|t| !(t > 0.0)) {
            return bad("voxel sizes must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.growth.interval == 0 {
            return bad("growth interval must be positive".into());
        }
        ShapeExponent::from_beta(self.beta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            k: self.k,
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            exponent: ShapeExponent::from_beta(self.beta).map_err(|e| Error::Config(e.to_string()))?,
            opacity_model: self.opacity,
            motion_model: self.motion,
        })
    }

    fn anchor_init(&self) -> AnchorInit {
        AnchorInit {
            k: self.k,
            feature_dim: self.feature_dim,
            max_points: self.init.max_points,
            init_offset_cells: self.init.offset_cells,
            grow_offset_cells: self.init.grow_offset_cells,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: LossTerms,
    pub anchors: usize,
    pub gaussians_rendered: usize,
    pub grown: usize,
    pub pruned: usize,
}

pub const CSV_HEADER: &str = "iteration,loss,l1,l_ssim,l_vol,anchors,gaussians_rendered";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.loss.total,
            self.loss.l1,
            self.loss.l_ssim,
            self.loss.l_vol,
            self.anchors,
            self.gaussians_rendered
        )
    }
}

pub fn write_log_csv<W: Write>(mut w: W, records: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Everything one optimization step needs from a forward and backward pass.
pub struct StepGrads {
    pub terms: LossTerms,
    pub grads: ParamGrads,
    pub output: RenderOutput,
    pub backward: BackwardOutput,
}

/// Renders, evaluates the training objective against `gt` and
/// back-propagates it to every scene parameter.
pub fn loss_and_grads(
    scene: &Scene,
    cam: &Camera,
    t_r: f64,
    gt: &Image,
    weights: &LossWeights,
    cfg: &RenderConfig,
) -> Result<StepGrads> {
    let output = render(scene, cam, t_r, cfg)?;
    let (terms, d_image, d_vol) = frame_loss(&output.image, gt, &output.frame.splats, weights)?;
    let mut backward = render_backward(&output.frame, scene, &d_image, cfg)?;
    for (s, dv) in output.frame.splats.iter().zip(&d_vol) {
        backward.gaussian_grads[s.source].scale += dv;
    }
    let grads = spawn_scene_backward(scene, &cam.center(), &backward.gaussian_grads, cfg.execution);
    Ok(StepGrads {
        terms,
        grads,
        output,
        backward,
    })
}

/// A trained scene ready for inference.
#[derive(Debug, Clone)]
pub struct FinalScene {
    pub scene: Scene,
    pub cache: InferenceCache,
    pub pruned: Vec<u64>,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    dataset: &'a SceneDataset,
    scene: Scene,
    optimizer: OptimizerState,
    ledger: GradientLedger,
    rng: ChaCha8Rng,
    order: Vec<(usize, usize)>,
    cursor: usize,
    iteration: u64,
    history: Vec<IterationRecord>,
    growth_snapshot: Vec<(GaussianKey, LedgerEntry)>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a SceneDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let temporal = config
            .temporal_voxel
            .unwrap_or_else(|| 1.0 / (dataset.frame_count.max(2) - 1) as f64);
        let mut grid = VoxelGrid4D::new(config.spatial_voxel, temporal).map_err(|e| Error::Config(e.to_string()))?;
        if config.init.t0_frame >= dataset.frame_count {
            return Err(Error::Config(format!("t0 frame {} is past the clip", config.init.t0_frame)));
        }
        let t0 = dataset.time(config.init.t0_frame);
        let anchors = init_anchors(&dataset.points.points, t0, &mut grid, &config.anchor_init(), &mut rng)
            .map_err(|e| Error::Data(e.to_string()))?;
        let mlp_init = MlpInit {
            hidden: config.hidden,
            opacity_bias: config.init.opacity_bias,
            scale: config.init.scale.unwrap_or(config.spatial_voxel),
            inv_temporal_scale: config.init.inv_temporal_scale,
            out_scale: config.init.out_scale,
        };
        let mlps = MlpStack::init(config.feature_dim, config.k, config.motion, &mlp_init, &mut rng);
        let scene = Scene::new(config.model()?, anchors, grid, mlps);
        let optimizer = OptimizerState::new(&scene, config.adam, config.rates, config.iterations);
        let ledger = GradientLedger::for_anchors(scene.anchors());
        let order = dataset.train_pairs();
        log::info!(
            "initialized {} anchors ({} Gaussians) from {} points",
            scene.anchors().len(),
            scene.gaussian_count(),
            dataset.points.points.len()
        );
        Ok(Trainer {
            config,
            dataset,
            scene,
            optimizer,
            ledger,
            rng,
            cursor: order.len(),
            order,
            iteration: 0,
            history: Vec::new(),
            growth_snapshot: Vec::new(),
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn ledger(&self) -> &GradientLedger {
        &self.ledger
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    /// Ledger entries captured just before the most recent growing event.
    pub fn growth_snapshot(&self) -> &[(GaussianKey, LedgerEntry)] {
        &self.growth_snapshot
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            background: self.dataset.background,
            ..self.config.render
        }
    }

    fn next_pair(&mut self) -> (usize, usize) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let p = self.order[self.cursor];
        self.cursor += 1;
        p
    }

    fn growth_due(&self) -> bool {
        let g = &self.config.growth;
        let until = (g.until_fraction * self.config.iterations as f64) as u64;
        self.config.growing != GrowingMode::Off
            && self.iteration >= g.start
            && self.iteration <= until
            && self.iteration % g.interval == 0
    }

    /// One optimization step on a sampled training view.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let (c, f) = self.next_pair();
        let cam = &self.dataset.cameras[c];
        let t = self.dataset.time(f);
        let cfg = self.render_config();
        let step = loss_and_grads(&self.scene, cam, t, &self.dataset.images[c][f], &self.config.loss, &cfg)?;
        let terms = step.terms;
        let grads_finite = step
            .grads
            .features
            .iter()
            .chain(&step.grads.offsets)
            .chain(step.grads.mlps.heads.iter().flatten())
            .all(|g| g.is_finite());
        if !terms.total.is_finite() || !grads_finite {
            return Err(Error::NumericalAbort(format!(
                "non-finite loss or gradient at iteration {} (camera {c}, frame {f}): total {}, l1 {}, l_ssim {}, l_vol {}; {} anchors, {} splats",
                self.iteration + 1,
                terms.total,
                terms.l1,
                terms.l_ssim,
                terms.l_vol,
                self.scene.anchors().len(),
                step.output.frame.splats.len()
            )));
        }
        if self.config.growing != GrowingMode::Off {
            for r in &step.backward.records {
                if r.activation > 0.0 {
                    self.ledger.accumulate(r.key, r.norm(), r.activation, r.sigma, self.config.gamma)?;
                } else {
                    self.ledger.accumulate_inactive(r.key)?;
                }
            }
            for key in &step.output.frame.inactive {
                self.ledger.accumulate_inactive(*key)?;
            }
        }
        self.optimizer.apply(&mut self.scene, &step.grads);
        self.iteration += 1;
        let params_finite = self.scene.mlps().heads.iter().all(|h| h.is_finite())
            && self.scene.anchors().iter().all(|a| {
                a.feature.iter().all(|v| v.is_finite()) && a.offsets.iter().flatten().all(|v| v.is_finite())
            });
        if !params_finite {
            return Err(Error::NumericalAbort(format!(
                "non-finite parameters after the update at iteration {} (camera {c}, frame {f}): loss {}",
                self.iteration, terms.total
            )));
        }

        let mut grown = 0;
        if self.growth_due() {
            grown = self.grow();
        }
        let mut pruned = 0;
        if self.config.prune_every.is_some_and(|p| p > 0 && self.iteration % p == 0) {
            pruned = self.prune();
        }
        let rec = IterationRecord {
            iteration: self.iteration,
            loss: terms,
            anchors: self.scene.anchors().len(),
            gaussians_rendered: step.output.frame.splats.len(),
            grown,
            pruned,
        };
        self.history.push(rec);
        Ok(rec)
    }

    fn grow(&mut self) -> usize {
        let Some(stat) = self.config.growing.statistic() else {
            return 0;
        };
        self.growth_snapshot = self.ledger.entries();
        let positions: Vec<(GaussianKey, [f64; 4])> = self
            .scene
            .anchors()
            .iter()
            .flat_map(|a| {
                (0..a.offsets.len()).map(move |s| {
                    (
                        GaussianKey {
                            anchor: a.id,
                            slot: s as u32,
                        },
                        a.gaussian_position(s),
                    )
                })
            })
            .collect();
        let init = self.config.anchor_init();
        let threshold = self.config.growth.threshold;
        let (anchors, grid, _) = self.scene.parts_mut();
        let added = crate::anchor::grow_anchors(
            &mut self.ledger,
            &positions,
            anchors,
            grid,
            threshold,
            stat,
            &init,
            &mut self.rng,
        );
        self.optimizer.extend_anchors(added.len());
        if !added.is_empty() {
            log::debug!("iteration {}: grew {} anchors", self.iteration, added.len());
        }
        added.len()
    }

    fn prune(&mut self) -> usize {
        let keep = crate::anchor::valid_anchor_mask(&base_opacities(&self.scene), self.scene.model().k);
        let removed = self.scene.prune_invalid();
        if !removed.is_empty() {
            self.optimizer.retain_anchors(&keep);
            for id in &removed {
                self.ledger.remove_anchor(*id, self.scene.model().k);
            }
        }
        removed.len()
    }

    /// Runs the remaining iterations, calling `progress` after each.
    pub fn run(&mut self, mut progress: impl FnMut(&IterationRecord)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let rec = self.step()?;
            progress(&rec);
        }
        Ok(())
    }

    /// Rounds parameters to storage precision, prunes invalid anchors and
    /// builds the inference cache.
    pub fn finalize(self) -> FinalScene {
        finalize_scene(self.scene)
    }
}

pub fn finalize_scene(mut scene: Scene) -> FinalScene {
    scene.quantize_f32();
    let pruned = scene.prune_invalid();
    let cache = build_inference_cache(&scene);
    FinalScene { scene, cache, pruned }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            growing: GrowingMode::Naive,
            temporal_voxel: Some(0.05),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("iterations = 10\ngrowing = \"off\"\n").unwrap();
        assert_eq!(partial.iterations, 10);
        assert_eq!(partial.growing, GrowingMode::Off);
        assert_eq!(partial.k, 10);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(TrainConfig::from_toml("iterations = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.loss.lambda_ssim = 1.5;
        assert!(c.validate().is_err());
        assert!("sideways".parse::<GrowingMode>().is_err());
        assert_eq!("naive".parse::<GrowingMode>().unwrap(), GrowingMode::Naive);
    }

    #[test]
    fn paper_scale_values() {
        let p = TrainConfig::paper();
        assert_eq!(p.iterations, 120_000);
        assert_eq!(p.spatial_voxel, 0.001);
        assert_eq!((p.loss.lambda_ssim, p.loss.lambda_vol), (0.2, 0.01));
        assert_eq!((p.beta, p.gamma, p.k), (2.0, 1.0, 10));
    }
}
