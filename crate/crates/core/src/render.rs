//! Differentiable CPU splatting: slice, cull, project, depth-sort and
//! alpha-composite, with the exact reverse pass back to every Gaussian
//! property.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::anchor::GaussianKey;
use crate::error::{Error, Result};
use crate::geometry::{
    conic_backward, covariance_unchecked, disk_hits_image, project_backward, project_gaussian,
    project_with_cov, Camera, Gaussian3D, Sym2, DEFAULT_LOWPASS,
};
use crate::image::Image;
use crate::par::{self, Execution};
use crate::scene::Scene;
use crate::spawn::{spawn, spawn_scene, view_direction, GaussianGrad, InferenceCache, NeuralGaussian4D};
use crate::temporal::{motion_rate, slice_to_3d, TemporalOpacity};

/// Upper clamp on per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.999;

/// Image-bounds margin in standard deviations of the 2D footprint.
pub const BOUNDS_SIGMA: f64 = 3.0;

const BAND_ROWS: usize = 4;
const SPLAT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Every pixel walks the full depth-sorted list restricted to its row
    /// band.
    #[default]
    PerPixel,
    /// Square tiles of the given side in pixels.
    Tiles(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Keep only Gaussians with sliced opacity above this value.
    pub opacity_threshold: Option<f64>,
    /// Keep only Gaussians with temporal activation above this value.
    pub activation_epsilon: Option<f64>,
    /// Drop Gaussians whose 3σ disk misses the image.
    pub bounds_cull: bool,
    /// Evaluate each Gaussian only within this many `√λ_max` of its mean.
    pub cutoff_sigma: Option<f64>,
    pub lowpass: f64,
    pub background: [f64; 3],
    pub binning: Binning,
    pub execution: Execution,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            opacity_threshold: Some(0.0),
            activation_epsilon: Some(1e-3),
            bounds_cull: true,
            cutoff_sigma: Some(3.0),
            lowpass: DEFAULT_LOWPASS,
            background: [0.0; 3],
            binning: Binning::PerPixel,
            execution: Execution::Parallel,
        }
    }
}

impl RenderConfig {
    /// No culling and no cutoff: the same image as [`render_bruteforce`].
    pub fn exact() -> Self {
        RenderConfig {
            opacity_threshold: None,
            activation_epsilon: None,
            bounds_cull: false,
            cutoff_sigma: None,
            ..Self::default()
        }
    }
}

/// Screen-space record of one Gaussian that survived culling.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub key: GaussianKey,
    /// Index of the source Gaussian in the frame's input list.
    pub source: usize,
    /// Sliced 3D Gaussian.
    pub gaussian: Gaussian3D,
    /// Temporal activation `α′`.
    pub activation: f64,
    pub mean2d: Vector2<f64>,
    pub cov2d: Sym2,
    pub conic: Sym2,
    pub depth: f64,
    /// Evaluation radius in pixels, infinite without a cutoff.
    pub radius: f64,
}

impl Splat {
    fn bbox(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        if !self.radius.is_finite() {
            return Some([0, 0, width - 1, height - 1]);
        }
        let x0 = (self.mean2d.x - self.radius - 0.5).ceil().max(0.0);
        let y0 = (self.mean2d.y - self.radius - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d.x + self.radius - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (self.mean2d.y + self.radius - 0.5).floor().min(height as f64 - 1.0);
        (x0 <= x1 && y0 <= y1).then_some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
    }
}

/// Gaussians sliced at `t_r`, culled and depth-sorted for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatFrame {
    pub t_r: f64,
    pub camera: Camera,
    pub scene_version: u64,
    pub temporal: TemporalOpacity,
    /// Spawned Gaussians, anchor-major.
    pub gaussians: Vec<NeuralGaussian4D>,
    /// Sorted by `(depth, key)`.
    pub splats: Vec<Splat>,
    /// In-frustum Gaussians culled by the activation epsilon.
    pub inactive: Vec<GaussianKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Residual transmittance per pixel.
    pub transmittance: Vec<f64>,
    pub frame: SplatFrame,
}

/// Screen-space position gradient of one composited Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradRecord {
    pub key: GaussianKey,
    pub grad2d: Vector2<f64>,
    pub activation: f64,
    /// Temporal scale `σ = 1/σ_inv`.
    pub sigma: f64,
}

impl GradRecord {
    pub fn norm(&self) -> f64 {
        self.grad2d.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput {
    /// One entry per spawned Gaussian of the frame.
    pub gaussian_grads: Vec<GaussianGrad>,
    /// One entry per splat, in splat order.
    pub records: Vec<GradRecord>,
}

/// Gradient reaching a splat's screen-space quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub mean2d: Vector2<f64>,
    pub conic: Sym2,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.conic.a += o.conic.a;
        self.conic.b += o.conic.b;
        self.conic.c += o.conic.c;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

enum Culled {
    Kept(Box<Splat>),
    Inactive,
    Dropped,
}

fn make_splat(
    key: GaussianKey,
    source: usize,
    gaussian: Gaussian3D,
    activation: f64,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Culled {
    let sigma = covariance_unchecked(&gaussian.rotation, &gaussian.scale);
    let Some(p) = project_with_cov(&gaussian.center, &sigma, cam, cfg.lowpass) else {
        return Culled::Dropped;
    };
    let det = p.cov2d.det();
    if !(det > 0.0 && det.is_finite()) {
        return Culled::Dropped;
    }
    let sd = p.cov2d.max_eigenvalue().sqrt();
    if cfg.bounds_cull && !disk_hits_image(&p.mean2d, BOUNDS_SIGMA * sd, cam.width, cam.height) {
        return Culled::Dropped;
    }
    if let Some(eps) = cfg.activation_epsilon {
        if activation <= eps {
            return Culled::Inactive;
        }
    }
    if let Some(th) = cfg.opacity_threshold {
        if gaussian.opacity <= th {
            return Culled::Dropped;
        }
    }
    Culled::Kept(Box::new(Splat {
        key,
        source,
        activation,
        mean2d: p.mean2d,
        cov2d: p.cov2d,
        conic: p.cov2d.inverse(),
        depth: p.depth,
        radius: cfg.cutoff_sigma.map_or(f64::INFINITY, |k| k * sd),
        gaussian,
    }))
}

fn sort_splats(splats: &mut [Splat]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.key.cmp(&b.key)));
}

/// Slices, culls and sorts spawned Gaussians.
pub fn prepare_frame(
    gaussians: Vec<NeuralGaussian4D>,
    temporal: TemporalOpacity,
    cam: &Camera,
    t_r: f64,
    scene_version: u64,
    cfg: &RenderConfig,
) -> SplatFrame {
    let chunks = par::map_indexed(cfg.execution, par::chunk_count(gaussians.len(), SPLAT_CHUNK), |ci| {
        let start = ci * SPLAT_CHUNK;
        let end = (start + SPLAT_CHUNK).min(gaussians.len());
        let mut kept = Vec::new();
        let mut inactive = Vec::new();
        for (i, g) in gaussians[start..end].iter().enumerate() {
            let s = slice_to_3d(g, t_r, &temporal);
            match make_splat(g.key, start + i, s.gaussian, s.activation, cam, cfg) {
                Culled::Kept(sp) => kept.push(*sp),
                Culled::Inactive => inactive.push(g.key),
                Culled::Dropped => {}
            }
        }
        (kept, inactive)
    });
    let mut splats = Vec::new();
    let mut inactive = Vec::new();
    for (k, i) in chunks {
        splats.extend(k);
        inactive.extend(i);
    }
    sort_splats(&mut splats);
    SplatFrame {
        t_r,
        camera: cam.clone(),
        scene_version,
        temporal,
        gaussians,
        splats,
        inactive,
    }
}

/// Renders `scene` at time `t_r`.
pub fn render(scene: &Scene, cam: &Camera, t_r: f64, cfg: &RenderConfig) -> Result<RenderOutput> {
    render_impl(scene, None, cam, t_r, cfg)
}

/// Renders with the time- and view-invariant head outputs taken from `cache`.
pub fn render_cached(
    scene: &Scene,
    cache: &InferenceCache,
    cam: &Camera,
    t_r: f64,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    render_impl(scene, Some(cache), cam, t_r, cfg)
}

fn render_impl(
    scene: &Scene,
    cache: Option<&InferenceCache>,
    cam: &Camera,
    t_r: f64,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    cam.validate()?;
    if !t_r.is_finite() {
        return Err(Error::invalid(format!("render time must be finite, got {t_r}")));
    }
    let gaussians = spawn_scene(scene, &cam.center(), cache, cfg.execution)?;
    let frame = prepare_frame(gaussians, scene.temporal_opacity(), cam, t_r, scene.version(), cfg);
    let (image, transmittance) = rasterize(&frame.splats, cam.width, cam.height, cfg);
    Ok(RenderOutput {
        image,
        transmittance,
        frame,
    })
}

/// Composites explicit 3D Gaussians; keys only order depth ties.
pub fn render_gaussians(
    gaussians: &[(GaussianKey, Gaussian3D)],
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(Image, Vec<f64>)> {
    cam.validate()?;
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, (k, g))| match make_splat(*k, i, g.clone(), 1.0, cam, cfg) {
            Culled::Kept(s) => Some(*s),
            _ => None,
        })
        .collect();
    sort_splats(&mut splats);
    Ok(rasterize(&splats, cam.width, cam.height, cfg))
}

/// Rectangular pixel region `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Region {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn regions(width: usize, height: usize, binning: Binning) -> (Vec<Region>, usize, usize) {
    let (tw, th) = match binning {
        Binning::PerPixel => (width, BAND_ROWS),
        Binning::Tiles(n) => (n.max(1), n.max(1)),
    };
    let nx = width.div_ceil(tw);
    let ny = height.div_ceil(th);
    let mut out = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            out.push(Region {
                x0: tx * tw,
                y0: ty * th,
                x1: ((tx + 1) * tw).min(width),
                y1: ((ty + 1) * th).min(height),
            });
        }
    }
    (out, tw, th)
}

/// Per-region splat index lists, each in depth order.
fn bin_splats(splats: &[Splat], width: usize, height: usize, binning: Binning) -> (Vec<Region>, Vec<Vec<u32>>) {
    let (regs, tw, th) = regions(width, height, binning);
    let nx = width.div_ceil(tw);
    let mut lists = vec![Vec::new(); regs.len()];
    if width == 0 || height == 0 {
        return (regs, lists);
    }
    for (i, s) in splats.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = s.bbox(width, height) else {
            continue;
        };
        for ty in y0 / th..=y1 / th {
            for tx in x0 / tw..=x1 / tw {
                lists[ty * nx + tx].push(i as u32);
            }
        }
    }
    (regs, lists)
}

/// `a = clamp(α·exp(−½dᵀQd), 0, ALPHA_MAX)` at pixel center `p`, together
/// with the unclamped Gaussian factor. `None` outside the cutoff.
#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, Vector2<f64>)> {
    let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
    if s.radius.is_finite() && d.norm_squared() > s.radius * s.radius {
        return None;
    }
    let g = (-0.5 * s.conic.quad(&d)).exp();
    Some(((s.gaussian.opacity * g).clamp(0.0, ALPHA_MAX), g, d))
}

fn rasterize(splats: &[Splat], width: usize, height: usize, cfg: &RenderConfig) -> (Image, Vec<f64>) {
    let (regs, lists) = bin_splats(splats, width, height, cfg.binning);
    let bg = Vector3::from(cfg.background);
    let parts = par::map_indexed(cfg.execution, regs.len(), |ri| {
        let r = regs[ri];
        let list = &lists[ri];
        let mut colors = Vec::with_capacity((r.x1 - r.x0) * (r.y1 - r.y0));
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = Vector3::zeros();
                let mut t = 1.0;
                for &i in list {
                    let s = &splats[i as usize];
                    let Some((a, _, _)) = splat_alpha(s, px, py) else {
                        continue;
                    };
                    if a <= 0.0 {
                        continue;
                    }
                    c += s.gaussian.color * (a * t);
                    t *= 1.0 - a;
                }
                colors.push((c + bg * t, t));
            }
        }
        colors
    });
    let mut image = Image::new(width, height, 3);
    let mut trans = vec![0.0; width * height];
    for (r, colors) in regs.iter().zip(parts) {
        let mut it = colors.into_iter();
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let (c, t) = it.next().expect("region pixel count");
                image.pixel_mut(x, y).copy_from_slice(c.as_slice());
                trans[y * width + x] = t;
            }
        }
    }
    (image, trans)
}

/// Reverse pass of the compositing step: gradients of the splats' screen
/// quantities given `d_image = ∂L/∂image`. Region partials are reduced in
/// region order.
pub fn rasterize_backward(
    splats: &[Splat],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
    d_image: &Image,
) -> Vec<SplatGrad> {
    let (regs, lists) = bin_splats(splats, width, height, cfg.binning);
    let bg = Vector3::from(cfg.background);
    let parts = par::map_indexed(cfg.execution, regs.len(), |ri| {
        let r = regs[ri];
        let list = &lists[ri];
        let mut local = vec![SplatGrad::default(); list.len()];
        // (local index, a, T before, g, d, clamped)
        let mut hits: Vec<(usize, f64, f64, f64, Vector2<f64>, bool)> = Vec::new();
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let dc = Vector3::from_column_slice(d_image.pixel(x, y));
                if dc == Vector3::zeros() {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                hits.clear();
                let mut t = 1.0;
                for (li, &i) in list.iter().enumerate() {
                    let s = &splats[i as usize];
                    let Some((a, g, d)) = splat_alpha(s, px, py) else {
                        continue;
                    };
                    if a <= 0.0 {
                        continue;
                    }
                    let raw = s.gaussian.opacity * g;
                    hits.push((li, a, t, g, d, raw >= ALPHA_MAX));
                    t *= 1.0 - a;
                }
                // Color composited behind the current entry.
                let mut behind = bg * t;
                for &(li, a, ti, g, d, clamped) in hits.iter().rev() {
                    let s = &splats[list[li] as usize];
                    let c = s.gaussian.color;
                    let gr = &mut local[li];
                    gr.color += dc * (a * ti);
                    let d_a = dc.dot(&(c * ti - behind / (1.0 - a)));
                    behind += c * (a * ti);
                    if clamped {
                        continue;
                    }
                    gr.opacity += d_a * g;
                    // a = α·exp(p), p = −½dᵀQd, d = pixel − mean
                    let d_p = d_a * s.gaussian.opacity * g;
                    gr.conic.a += -0.5 * d_p * d.x * d.x;
                    gr.conic.b += -d_p * d.x * d.y;
                    gr.conic.c += -0.5 * d_p * d.y * d.y;
                    let qd = Vector2::new(
                        s.conic.a * d.x + s.conic.b * d.y,
                        s.conic.b * d.x + s.conic.c * d.y,
                    );
                    gr.mean2d += qd * d_p;
                }
            }
        }
        local
    });
    let mut out = vec![SplatGrad::default(); splats.len()];
    for (list, local) in lists.iter().zip(parts) {
        for (&i, g) in list.iter().zip(&local) {
            out[i as usize].add(g);
        }
    }
    out
}

/// Reverse pass of [`render`] down to every spawned Gaussian's properties,
/// plus the per-splat screen-space position gradients.
pub fn render_backward(
    frame: &SplatFrame,
    scene: &Scene,
    d_image: &Image,
    cfg: &RenderConfig,
) -> Result<BackwardOutput> {
    if frame.scene_version != scene.version() {
        return Err(Error::FrameMismatch(format!(
            "frame rendered at scene version {}, scene is at {}",
            frame.scene_version,
            scene.version()
        )));
    }
    let cam = &frame.camera;
    if (d_image.width, d_image.height, d_image.channels) != (cam.width, cam.height, 3) {
        return Err(Error::FrameMismatch(format!(
            "image gradient is {}×{}×{}, frame is {}×{}×3",
            d_image.height, d_image.width, d_image.channels, cam.height, cam.width
        )));
    }
    let sg = rasterize_backward(&frame.splats, cam.width, cam.height, cfg, d_image);
    let per_splat = par::map_indexed(cfg.execution, par::chunk_count(frame.splats.len(), SPLAT_CHUNK), |ci| {
        let start = ci * SPLAT_CHUNK;
        let end = (start + SPLAT_CHUNK).min(frame.splats.len());
        (start..end)
            .map(|i| splat_to_gaussian_grad(&frame.splats[i], &sg[i], &frame.gaussians[frame.splats[i].source], frame))
            .collect::<Vec<_>>()
    });
    let mut gaussian_grads = vec![GaussianGrad::default(); frame.gaussians.len()];
    let mut records = Vec::with_capacity(frame.splats.len());
    for (s, (gg, rec)) in frame.splats.iter().zip(per_splat.into_iter().flatten()) {
        gaussian_grads[s.source] = gg;
        records.push(rec);
    }
    Ok(BackwardOutput {
        gaussian_grads,
        records,
    })
}

fn splat_to_gaussian_grad(
    s: &Splat,
    sg: &SplatGrad,
    g4: &NeuralGaussian4D,
    frame: &SplatFrame,
) -> (GaussianGrad, GradRecord) {
    let d_cov = conic_backward(&s.conic, &sg.conic);
    let pg = project_backward(&s.gaussian, &frame.camera, &sg.mean2d, &d_cov);

    let x_t = g4.position[3];
    let delta = frame.t_r - x_t;
    let coeffs = g4.motion_coeffs();
    let mut out = GaussianGrad {
        rotation: pg.rotation,
        scale: pg.scale,
        color: sg.color,
        opacity: sg.opacity * s.activation,
        ..Default::default()
    };
    // α = ρ·g(t, x_t, σ_inv)
    let d_act = sg.opacity * g4.opacity;
    let (dg_dxt, dg_dinv) = frame.temporal.grad(frame.t_r, x_t, g4.inv_temporal_scale);
    out.inv_temporal_scale = d_act * dg_dinv;
    // μ = x_xyz + h(t − x_t)
    let mut p = 1.0;
    for j in 0..g4.motion_degree {
        p *= delta;
        for i in 0..3 {
            out.motion[3 * j + i] = pg.center[i] * p;
        }
    }
    let rate = motion_rate(delta, coeffs);
    out.position = [
        pg.center.x,
        pg.center.y,
        pg.center.z,
        d_act * dg_dxt - pg.center.dot(&rate),
    ];
    let rec = GradRecord {
        key: s.key,
        grad2d: sg.mean2d,
        activation: s.activation,
        sigma: 1.0 / g4.inv_temporal_scale,
    };
    (out, rec)
}

/// Reference renderer: every pixel composites every Gaussian in the depth
/// range, with no culling and no cutoff.
pub fn render_bruteforce(scene: &Scene, cam: &Camera, t_r: f64, background: [f64; 3]) -> Result<Image> {
    cam.validate()?;
    let op = scene.temporal_opacity();
    let mut list = Vec::new();
    for (idx, a) in scene.anchors().iter().enumerate() {
        let dir = view_direction(a, &cam.center());
        for g in spawn(a, idx, &dir, scene.mlps())? {
            list.push((g.key, slice_to_3d(&g, t_r, &op).gaussian));
        }
    }
    Ok(composite_bruteforce(&list, cam, DEFAULT_LOWPASS, background))
}

/// Reference compositing of explicit 3D Gaussians.
pub fn composite_bruteforce(
    gaussians: &[(GaussianKey, Gaussian3D)],
    cam: &Camera,
    lowpass: f64,
    background: [f64; 3],
) -> Image {
    let mut proj: Vec<_> = gaussians
        .iter()
        .filter_map(|(k, g)| {
            let p = project_gaussian(g, cam, lowpass)?;
            let det = p.cov2d.det();
            (det > 0.0 && det.is_finite()).then(|| (p.depth, *k, p.mean2d, p.cov2d.inverse(), g.opacity, g.color))
        })
        .collect();
    proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut image = Image::new(cam.width, cam.height, 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut c = [0.0f64; 3];
            let mut t = 1.0f64;
            for (_, _, m, q, alpha, color) in &proj {
                let dx = x as f64 + 0.5 - m.x;
                let dy = y as f64 + 0.5 - m.y;
                let power = q.a * dx * dx + 2.0 * q.b * dx * dy + q.c * dy * dy;
                let a = (alpha * (-0.5 * power).exp()).clamp(0.0, ALPHA_MAX);
                if a <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += color[ch] * (a * t);
                }
                t *= 1.0 - a;
            }
            let px = image.pixel_mut(x, y);
            for ch in 0..3 {
                px[ch] = c[ch] + background[ch] * t;
            }
        }
    }
    image
}

/// Upper bound on the per-channel difference between a render with a
/// `k`-sigma cutoff and the exact render: the sum of the dropped tail
/// weights `α·e^{−k²/2}` over all splats.
pub fn cutoff_error_bound(splats: &[Splat], k: f64) -> f64 {
    splats.iter().map(|s| s.gaussian.opacity.max(0.0)).sum::<f64>() * (-0.5 * k * k).exp()
}
