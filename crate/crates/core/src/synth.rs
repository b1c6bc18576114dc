//! Deterministic synthetic dynamic scenes with known ground truth.
//!
//! Cameras sit on a horizontal ring looking at a common center. Static blobs
//! persist for the whole clip; dynamic blobs follow piecewise-linear paths
//! and exist only between their first and last frame. The initial point
//! cloud is sampled from the static blobs alone.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchor::GaussianKey;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Gaussian3D, DEFAULT_LOWPASS};
use crate::image::Image;
use crate::io::dataset::{frame_time, SceneDataset};
use crate::io::ply::PointCloud;
use crate::render::composite_bruteforce;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBlob {
    /// First and last frame (inclusive) in which the blob exists.
    pub start_frame: usize,
    pub end_frame: usize,
    /// Path traversed at constant speed per segment over the support.
    pub waypoints: Vec<[f64; 3]>,
    pub color: [f64; 3],
    pub scale: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub cameras: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub look_at: [f64; 3],
    pub fov_y_degrees: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub static_blobs: usize,
    /// Static blob centers are uniform in `[-extent, extent]³`.
    pub static_extent: f64,
    pub static_scale: [f64; 2],
    pub static_opacity: f64,
    /// Minimum distance from a static blob center to any dynamic path.
    pub dynamic_clearance: f64,
    pub dynamic_blobs: Vec<DynamicBlob>,
    pub points_per_blob: usize,
    pub test_camera: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cameras: 8,
            ring_radius: 4.0,
            ring_height: 1.0,
            look_at: [0.0; 3],
            fov_y_degrees: 50.0,
            width: 48,
            height: 48,
            frames: 24,
            static_blobs: 40,
            static_extent: 1.0,
            static_scale: [0.06, 0.16],
            static_opacity: 0.9,
            dynamic_clearance: 0.5,
            dynamic_blobs: vec![
                DynamicBlob {
                    start_frame: 0,
                    end_frame: 23,
                    waypoints: vec![[-0.8, 0.3, -0.4], [0.0, 0.6, 0.0], [0.8, 0.3, 0.4]],
                    color: [0.95, 0.25, 0.1],
                    scale: 0.16,
                    opacity: 0.95,
                },
                DynamicBlob {
                    start_frame: 8,
                    end_frame: 16,
                    waypoints: vec![[0.3, -0.5, 0.6], [-0.3, -0.3, 0.4]],
                    color: [0.1, 0.85, 0.95],
                    scale: 0.18,
                    opacity: 0.95,
                },
            ],
            points_per_blob: 12,
            test_camera: 0,
            background: [0.0; 3],
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.cameras == 0 || self.test_camera >= self.cameras {
            return bad(format!("test camera {} invalid for {} cameras", self.test_camera, self.cameras));
        }
        if !(self.dynamic_clearance >= 0.0) {
            return bad("dynamic clearance must be non-negative".into());
        }
        if !(self.static_scale[0] > 0.0 && self.static_scale[0] <= self.static_scale[1]) {
            return bad("static scale range must be positive and ordered".into());
        }
        for (i, b) in self.dynamic_blobs.iter().enumerate() {
            if b.waypoints.is_empty() || b.start_frame > b.end_frame || b.end_frame >= self.frames {
                return bad(format!("dynamic blob {i} has an invalid support or path"));
            }
            if b.scale <= 0.0 {
                return bad(format!("dynamic blob {i} has a non-positive scale"));
            }
        }
        Ok(())
    }

    pub fn build_cameras(&self) -> Result<Vec<Camera>> {
        let target = Vector3::from(self.look_at);
        (0..self.cameras)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.cameras as f64;
                let eye = target + Vector3::new(self.ring_radius * a.cos(), self.ring_height, self.ring_radius * a.sin());
                Camera::look_at(
                    eye,
                    target,
                    Vector3::new(0.0, 1.0, 0.0),
                    self.fov_y_degrees.to_radians(),
                    self.width,
                    self.height,
                    0.05,
                    100.0,
                )
                .map_err(|e| Error::Config(e.to_string()))
            })
            .collect()
    }
}

impl DynamicBlob {
    /// Center at `frame`, or `None` outside the support.
    pub fn center_at(&self, frame: usize) -> Option<Vector3<f64>> {
        if frame < self.start_frame || frame > self.end_frame {
            return None;
        }
        let n = self.waypoints.len();
        if n == 1 || self.start_frame == self.end_frame {
            return Some(Vector3::from(self.waypoints[0]));
        }
        let s = (frame - self.start_frame) as f64 / (self.end_frame - self.start_frame) as f64 * (n - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        let f = s - i as f64;
        let (a, b) = (Vector3::from(self.waypoints[i]), Vector3::from(self.waypoints[i + 1]));
        Some(a + (b - a) * f)
    }
}

/// Oracle Gaussians of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub static_gaussians: Vec<Gaussian3D>,
    pub dynamic: Vec<DynamicBlob>,
}

impl GroundTruth {
    /// Gaussians present at `frame`, keyed by blob index (static first).
    pub fn gaussians_at(&self, frame: usize) -> Vec<(GaussianKey, Gaussian3D)> {
        let key = |i: usize| GaussianKey { anchor: i as u64, slot: 0 };
        let mut out: Vec<_> = self.static_gaussians.iter().enumerate().map(|(i, g)| (key(i), g.clone())).collect();
        let n = out.len();
        for (j, b) in self.dynamic.iter().enumerate() {
            if let Some(center) = b.center_at(frame) {
                out.push((
                    key(n + j),
                    Gaussian3D {
                        center,
                        rotation: [1.0, 0.0, 0.0, 0.0],
                        scale: Vector3::repeat(b.scale),
                        opacity: b.opacity,
                        color: Vector3::from(b.color),
                    },
                ));
            }
        }
        out
    }
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * s)).norm()
}

/// Distance from `p` to the polyline traced by a dynamic blob.
pub fn path_distance(blob: &DynamicBlob, p: &Vector3<f64>) -> f64 {
    let w: Vec<Vector3<f64>> = blob.waypoints.iter().map(|&q| Vector3::from(q)).collect();
    if w.len() == 1 {
        return (p - w[0]).norm();
    }
    w.windows(2).map(|s| segment_distance(p, &s[0], &s[1])).fold(f64::INFINITY, f64::min)
}

fn check_visible(p: &Vector3<f64>, cams: &[Camera], what: &str) -> Result<()> {
    for (c, cam) in cams.iter().enumerate() {
        let inside = cam
            .project_point(p)
            .is_some_and(|m| m.x >= 0.0 && m.y >= 0.0 && m.x < cam.width as f64 && m.y < cam.height as f64);
        if !inside {
            return Err(Error::Config(format!("{what} at {:?} is outside camera {c}", p.as_slice())));
        }
    }
    Ok(())
}

/// Renders every view and frame of `spec`. Images are quantized to 8 bits,
/// so they equal what a PNG round trip yields.
pub fn generate_scene(spec: &SynthSpec) -> Result<(SceneDataset, GroundTruth)> {
    spec.validate()?;
    let cams = spec.build_cameras()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut static_gaussians = Vec::with_capacity(spec.static_blobs);
    for i in 0..spec.static_blobs {
        let e = spec.static_extent;
        let mut tries = 0;
        let center = loop {
            let c = Vector3::from(spec.look_at) + Vector3::from_fn(|_, _| rng.gen_range(-e..=e));
            if spec.dynamic_blobs.iter().all(|b| path_distance(b, &c) >= spec.dynamic_clearance) {
                break c;
            }
            tries += 1;
            if tries == 10_000 {
                return Err(Error::Config(format!(
                    "no room for static blob {i} at clearance {} from the dynamic paths",
                    spec.dynamic_clearance
                )));
            }
        };
        let scale = Vector3::from_fn(|_, _| rng.gen_range(spec.static_scale[0]..=spec.static_scale[1]));
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let rotation = if q.iter().map(|v| v * v).sum::<f64>() > 1e-6 { q } else { [1.0, 0.0, 0.0, 0.0] };
        let color = Vector3::from_fn(|_, _| rng.gen_range(0.1..0.9));
        check_visible(&center, &cams, "static blob")?;
        static_gaussians.push(Gaussian3D {
            center,
            rotation,
            scale,
            opacity: spec.static_opacity,
            color,
        });
    }
    for b in &spec.dynamic_blobs {
        for w in &b.waypoints {
            check_visible(&Vector3::from(*w), &cams, "dynamic waypoint")?;
        }
    }
    let truth = GroundTruth {
        static_gaussians,
        dynamic: spec.dynamic_blobs.clone(),
    };

    let mut points = Vec::with_capacity(spec.static_blobs * spec.points_per_blob);
    let mut colors = Vec::with_capacity(points.capacity());
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for g in &truth.static_gaussians {
        let r = crate::geometry::rotation_from_unit_quat(&crate::geometry::normalize_quat(&g.rotation));
        for _ in 0..spec.points_per_blob {
            let z = Vector3::from_fn(|i, _| unit.sample(&mut rng) * g.scale[i]);
            let p = g.center + r * z;
            points.push([p.x, p.y, p.z]);
            colors.push([g.color.x, g.color.y, g.color.z]);
        }
    }

    let images = cams
        .iter()
        .map(|cam| {
            (0..spec.frames)
                .map(|f| {
                    let im = composite_bruteforce(&truth.gaussians_at(f), cam, DEFAULT_LOWPASS, spec.background);
                    Image::from_u8(im.width, im.height, 3, &im.to_u8()).expect("same shape")
                })
                .collect()
        })
        .collect();
    let ds = SceneDataset {
        cameras: cams,
        frame_count: spec.frames,
        images,
        points: PointCloud {
            points,
            colors: Some(colors),
        },
        test_camera: spec.test_camera,
        background: spec.background,
    };
    ds.validate()?;
    Ok((ds, truth))
}

/// Normalized time of the midpoint of a blob's support.
pub fn support_center_time(blob: &DynamicBlob, frames: usize) -> f64 {
    0.5 * (frame_time(blob.start_frame, frames) + frame_time(blob.end_frame, frames))
}
