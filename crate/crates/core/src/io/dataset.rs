//! Multi-view image sequences with calibrated cameras.
//!
//! A dataset directory holds `manifest.json`, a point cloud and one PNG per
//! camera and frame. Manifest schema:
//!
//! ```json
//! {
//!   "frames": 24,
//!   "test_camera": 0,
//!   "background": [0.0, 0.0, 0.0],
//!   "pointcloud": "points.ply",
//!   "cameras": [
//!     {
//!       "fx": 51.5, "fy": 51.5, "cx": 24.0, "cy": 24.0,
//!       "rotation": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
//!       "translation": [0, 0, 4],
//!       "width": 48, "height": 48, "near": 0.1, "far": 100.0,
//!       "images": ["cam00/frame000.png", "..."]
//!     }
//!   ]
//! }
//! ```
//!
//! `rotation` is world-to-camera, row-major. Paths are relative to the
//! manifest.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::io::image_io::{load_png, save_png};
use crate::io::ply::{load_pointcloud, save_pointcloud, PointCloud};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub test_camera: usize,
    #[serde(default)]
    pub background: [f64; 3],
    pub pointcloud: String,
    pub cameras: Vec<CameraEntry>,
}

impl CameraEntry {
    fn camera(&self) -> Result<Camera> {
        let r = &self.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        let t = Vector3::from(self.translation);
        Camera::new(self.fx, self.fy, self.cx, self.cy, rotation, t, self.width, self.height, self.near, self.far)
            .map_err(|e| Error::Data(e.to_string()))
    }

    fn from_camera(cam: &Camera, images: Vec<String>) -> Self {
        let m = &cam.rotation;
        CameraEntry {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
            images,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub frame_count: usize,
    /// `images[camera][frame]`.
    pub images: Vec<Vec<Image>>,
    pub points: PointCloud,
    pub test_camera: usize,
    pub background: [f64; 3],
}

/// Normalized time of frame `i` in a clip of `frames` frames.
pub fn frame_time(i: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        i as f64 / (frames - 1) as f64
    }
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Data("dataset has no cameras".into()));
        }
        if self.frame_count == 0 {
            return Err(Error::Data("dataset has no frames".into()));
        }
        if self.test_camera >= self.cameras.len() {
            return Err(Error::Data(format!(
                "test camera {} out of range for {} cameras",
                self.test_camera,
                self.cameras.len()
            )));
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::Data("image table does not match camera count".into()));
        }
        for (c, (cam, frames)) in self.cameras.iter().zip(&self.images).enumerate() {
            if frames.len() != self.frame_count {
                return Err(Error::Data(format!(
                    "camera {c} has {} frames, expected {}",
                    frames.len(),
                    self.frame_count
                )));
            }
            for (f, im) in frames.iter().enumerate() {
                if (im.width, im.height, im.channels) != (cam.width, cam.height, 3) {
                    return Err(Error::Data(format!(
                        "camera {c} frame {f} is {}×{}×{}, expected {}×{}×3",
                        im.width, im.height, im.channels, cam.width, cam.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame_time(frame, self.frame_count)
    }

    /// All `(camera, frame)` pairs of the training cameras.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.cameras.len())
            .filter(|&c| c != self.test_camera || self.cameras.len() == 1)
            .flat_map(|c| (0..self.frame_count).map(move |f| (c, f)))
            .collect()
    }

    /// Writes the manifest, point cloud and PNG frames under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        let mut entries = Vec::with_capacity(self.cameras.len());
        for (c, cam) in self.cameras.iter().enumerate() {
            let sub = format!("cam{c:02}");
            let sub_path = dir.join(&sub);
            std::fs::create_dir_all(&sub_path).map_err(|e| Error::io(&sub_path, e))?;
            let mut names = Vec::with_capacity(self.frame_count);
            for (f, im) in self.images[c].iter().enumerate() {
                let name = format!("{sub}/frame{f:03}.png");
                save_png(dir.join(&name), im)?;
                names.push(name);
            }
            entries.push(CameraEntry::from_camera(cam, names));
        }
        save_pointcloud(dir.join("points.ply"), &self.points)?;
        let manifest = Manifest {
            frames: self.frame_count,
            test_camera: self.test_camera,
            background: self.background,
            pointcloud: "points.ply".into(),
            cameras: entries,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads from a dataset directory or a manifest file path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;

        let mut cameras = Vec::with_capacity(manifest.cameras.len());
        let mut images = Vec::with_capacity(manifest.cameras.len());
        for (c, entry) in manifest.cameras.iter().enumerate() {
            cameras.push(entry.camera()?);
            if entry.images.len() != manifest.frames {
                return Err(Error::Data(format!(
                    "camera {c} lists {} images, expected {}",
                    entry.images.len(),
                    manifest.frames
                )));
            }
            images.push(entry.images.iter().map(|p| load_png(root.join(p))).collect::<Result<Vec<_>>>()?);
        }
        let points = load_pointcloud(root.join(&manifest.pointcloud))?;
        let ds = SceneDataset {
            cameras,
            frame_count: manifest.frames,
            images,
            points,
            test_camera: manifest.test_camera,
            background: manifest.background,
        };
        ds.validate()?;
        Ok(ds)
    }
}
