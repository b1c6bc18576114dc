//! Held-out view evaluation.

use std::io::Write;

use crate::error::Result;
use crate::image::Image;
use crate::io::checkpoint::storage_report;
use crate::io::dataset::SceneDataset;
use crate::metrics::{dynamic_mask, DynamicMask, MaskMode, MaskedMetrics, MetricAccumulator, MASK_THRESHOLD};
use crate::render::{render_cached, RenderConfig};
use crate::scene::Scene;
use crate::spawn::build_inference_cache;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub metrics: MaskedMetrics,
    pub anchors: usize,
    pub gaussians: usize,
    pub storage_bytes: u64,
}

pub const REPORT_HEADER: &str = "psnr_dyn,ssim_dyn,psnr_full,ssim_full,anchors,gaussians,storage_bytes";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            opt(self.metrics.psnr_dyn),
            opt(self.metrics.ssim_dyn),
            self.metrics.psnr_full,
            self.metrics.ssim_full,
            self.anchors,
            self.gaussians,
            self.storage_bytes
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        writeln!(w, "{}", self.csv_row())
    }
}

/// The combined dynamic mask of the test camera's ground-truth frames.
pub fn test_view_mask(dataset: &SceneDataset) -> Result<DynamicMask> {
    dynamic_mask(&dataset.images[dataset.test_camera], MaskMode::Combined, MASK_THRESHOLD)
}

/// Renders every frame of the test camera.
pub fn render_test_view(scene: &Scene, dataset: &SceneDataset, cfg: &RenderConfig) -> Result<Vec<Image>> {
    let cache = build_inference_cache(scene);
    let cam = &dataset.cameras[dataset.test_camera];
    let cfg = RenderConfig {
        background: dataset.background,
        ..*cfg
    };
    (0..dataset.frame_count)
        .map(|f| Ok(render_cached(scene, &cache, cam, dataset.time(f), &cfg)?.image))
        .collect()
}

/// Metrics pooled over all frames of the test camera.
pub fn evaluate(scene: &Scene, dataset: &SceneDataset, cfg: &RenderConfig) -> Result<EvalReport> {
    let mask = test_view_mask(dataset)?;
    let renders = render_test_view(scene, dataset, cfg)?;
    let mut acc = MetricAccumulator::default();
    for (f, r) in renders.iter().enumerate() {
        acc.add(r, &dataset.images[dataset.test_camera][f], &mask.frames[f])?;
    }
    Ok(EvalReport {
        metrics: acc.finish(),
        anchors: scene.anchors().len(),
        gaussians: scene.gaussian_count(),
        storage_bytes: storage_report(scene).bytes_total,
    })
}
