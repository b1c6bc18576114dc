//! Binary checkpoint format.
//!
//! All fields little-endian:
//!
//! ```text
//! header   "A4DG" u32 version, u32 C, u32 K, f64 β, f64 spatial voxel,
//!          f64 temporal voxel, u64 anchor count                 (48 bytes)
//! anchors  per anchor: 4×f32 position, C×f32 feature, K×4×f32 offsets
//! mlps     opacity, shape, color, velocity; each is u32 layer count, then
//!          per layer u32 rows, u32 cols, rows×cols f32 weights (row-major),
//!          rows f32 biases
//! trailer  u32 motion model (0 linear, 1 polynomial),
//!          u32 opacity model (0 generalized, 1 gaussian4dgs)
//! ```
//!
//! Quaternions inside the network outputs use `(w, x, y, z)` order.
//! Parameters are stored as `f32`; anchor ids are renumbered on load.

use std::path::Path;

use serde::Serialize;

use crate::anchor::{AnchorSet, VoxelGrid4D};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::scene::{ModelConfig, Scene};
use crate::spawn::MlpStack;
use crate::temporal::{MotionModel, OpacityModel, ShapeExponent};

pub const MAGIC: [u8; 4] = *b"A4DG";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 48;
pub const TRAILER_BYTES: usize = 8;

/// Byte size of one stored anchor.
pub fn anchor_bytes(feature_dim: usize, k: usize) -> usize {
    4 * (4 + feature_dim + 4 * k)
}

/// Byte size of one stored two-layer MLP.
pub fn mlp_bytes(m: &Mlp) -> usize {
    4 + 2 * 8 + 4 * m.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StorageReport {
    pub bytes_total: u64,
    pub bytes_anchors: u64,
    pub bytes_mlps: u64,
    /// Header and trailer.
    pub bytes_other: u64,
    pub n_anchors: u64,
    pub n_gaussians: u64,
}

impl StorageReport {
    pub fn megabytes(&self) -> f64 {
        self.bytes_total as f64 / 1e6
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated {
                what: what.to_string(),
                expected: (self.at + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

fn motion_tag(m: MotionModel) -> u32 {
    match m {
        MotionModel::Linear => 0,
        MotionModel::Polynomial => 1,
    }
}

fn opacity_tag(m: OpacityModel) -> u32 {
    match m {
        OpacityModel::Generalized => 0,
        OpacityModel::Gaussian4dgs => 1,
    }
}

pub fn encode_checkpoint(scene: &Scene) -> Vec<u8> {
    let model = scene.model();
    let anchors = scene.anchors();
    let mut w = Writer(Vec::with_capacity(expected_size(scene)));
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(model.feature_dim as u32);
    w.u32(model.k as u32);
    w.f64(model.exponent.beta());
    w.f64(scene.grid().spatial);
    w.f64(scene.grid().temporal);
    w.u64(anchors.len() as u64);
    for a in anchors.iter() {
        w.f32s(&a.position);
        w.f32s(&a.feature);
        w.f32s(a.offsets.iter().flatten());
    }
    for m in &scene.mlps().heads {
        w.u32(2);
        w.u32(m.n_hidden as u32);
        w.u32(m.n_in as u32);
        w.f32s(m.w1());
        w.f32s(m.b1());
        w.u32(m.n_out as u32);
        w.u32(m.n_hidden as u32);
        w.f32s(m.w2());
        w.f32s(m.b2());
    }
    w.u32(motion_tag(model.motion_model));
    w.u32(opacity_tag(model.opacity_model));
    w.0
}

fn expected_size(scene: &Scene) -> usize {
    let m = scene.model();
    HEADER_BYTES
        + scene.anchors().len() * anchor_bytes(m.feature_dim, m.k)
        + scene.mlps().heads.iter().map(mlp_bytes).sum::<usize>()
        + TRAILER_BYTES
}

fn read_mlp(r: &mut Reader, n_in: usize, name: &str) -> Result<Mlp> {
    let layers = r.u32(name)?;
    if layers != 2 {
        return Err(Error::Data(format!("{name} MLP has {layers} layers, expected 2")));
    }
    let (h, cols) = (r.u32(name)? as usize, r.u32(name)? as usize);
    if cols != n_in || h == 0 || h > Mlp::MAX_HIDDEN {
        return Err(Error::Data(format!("{name} MLP first layer is {h}×{cols}, expected h×{n_in}")));
    }
    let mut params = r.f32s(h * n_in + h, name)?;
    let (n_out, cols) = (r.u32(name)? as usize, r.u32(name)? as usize);
    if cols != h {
        return Err(Error::Data(format!("{name} MLP second layer has {cols} columns, expected {h}")));
    }
    params.extend(r.f32s(n_out * h + n_out, name)?);
    let mut m = Mlp::zeros(n_in, h, n_out);
    m.params = params;
    Ok(m)
}

fn expect_outputs(m: &Mlp, n_out: usize, name: &str) -> Result<()> {
    if m.n_out != n_out {
        return Err(Error::Data(format!("{name} MLP has {} outputs, expected {n_out}", m.n_out)));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let c = r.u32("header")? as usize;
    let k = r.u32("header")? as usize;
    let beta = r.f64("header")?;
    let spatial = r.f64("header")?;
    let temporal = r.f64("header")?;
    let n = r.u64("header")? as usize;
    if c == 0 || k == 0 {
        return Err(Error::Data(format!("checkpoint declares C = {c}, K = {k}")));
    }
    let exponent = ShapeExponent::from_beta(beta).map_err(|e| Error::Data(e.to_string()))?;
    let grid_err = |e: Error| Error::Data(e.to_string());
    let need = n.saturating_mul(anchor_bytes(c, k));
    if bytes.len() - r.at < need {
        return Err(Error::Truncated {
            what: "anchor table".into(),
            expected: (r.at + need) as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.f32s(4, "anchor")?;
        let f = r.f32s(c, "anchor")?;
        let o = r.f32s(4 * k, "anchor")?;
        parts.push((
            [p[0], p[1], p[2], p[3]],
            f,
            o.chunks_exact(4).map(|s| [s[0], s[1], s[2], s[3]]).collect(),
        ));
    }
    let opacity = read_mlp(&mut r, c, "opacity")?;
    expect_outputs(&opacity, k, "opacity")?;
    let shape = read_mlp(&mut r, c, "shape")?;
    expect_outputs(&shape, k * crate::spawn::SHAPE_WIDTH, "shape")?;
    let color = read_mlp(&mut r, c + 3, "color")?;
    expect_outputs(&color, 3 * k, "color")?;
    let velocity = read_mlp(&mut r, c, "velocity")?;
    let motion = if velocity.n_out == 3 * k {
        MotionModel::Linear
    } else if velocity.n_out == 9 * k {
        MotionModel::Polynomial
    } else {
        return Err(Error::Data(format!("velocity MLP has {} outputs for K = {k}", velocity.n_out)));
    };
    let motion_tag_read = r.u32("trailer")?;
    let opacity_tag_read = r.u32("trailer")?;
    if motion_tag_read != motion_tag(motion) {
        return Err(Error::Data(format!("motion tag {motion_tag_read} disagrees with the velocity MLP width")));
    }
    let opacity_model = match opacity_tag_read {
        0 => OpacityModel::Generalized,
        1 => OpacityModel::Gaussian4dgs,
        t => return Err(Error::Data(format!("unknown opacity model tag {t}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    let hidden = opacity.n_hidden;
    if [&shape, &color, &velocity].iter().any(|m| m.n_hidden != hidden) {
        return Err(Error::Data("MLP heads disagree on hidden width".into()));
    }

    let model = ModelConfig {
        k,
        feature_dim: c,
        hidden,
        exponent,
        opacity_model,
        motion_model: motion,
    };
    let anchors = AnchorSet::from_parts(k, c, parts);
    let mut grid = VoxelGrid4D::new(spatial, temporal).map_err(grid_err)?;
    grid.rebuild(&anchors)?;
    let mlps = MlpStack {
        heads: [opacity, shape, color, velocity],
        k,
        feature_dim: c,
        motion,
    };
    Ok(Scene::new(model, anchors, grid, mlps))
}

pub fn save_checkpoint(scene: &Scene, path: impl AsRef<Path>) -> Result<StorageReport> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(scene);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    compute_storage_report(&bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Attributes every byte of an encoded checkpoint to its section.
pub fn compute_storage_report(bytes: &[u8]) -> Result<StorageReport> {
    let scene = decode_checkpoint(bytes)?;
    let m = scene.model();
    let n = scene.anchors().len() as u64;
    let bytes_anchors = n * anchor_bytes(m.feature_dim, m.k) as u64;
    let bytes_mlps = scene.mlps().heads.iter().map(mlp_bytes).sum::<usize>() as u64;
    let bytes_other = (HEADER_BYTES + TRAILER_BYTES) as u64;
    let bytes_total = bytes.len() as u64;
    debug_assert_eq!(bytes_total, bytes_anchors + bytes_mlps + bytes_other);
    Ok(StorageReport {
        bytes_total,
        bytes_anchors,
        bytes_mlps,
        bytes_other,
        n_anchors: n,
        n_gaussians: n * m.k as u64,
    })
}

/// Report for a scene without writing it.
pub fn storage_report(scene: &Scene) -> StorageReport {
    compute_storage_report(&encode_checkpoint(scene)).expect("freshly encoded checkpoint decodes")
}
