//! Shared MLPs that decode an anchor feature into the properties of its `K`
//! neural 4D Gaussians, their reverse pass, and the inference cache of the
//! time- and view-invariant head outputs.

use nalgebra::Vector3;
use rand::Rng;

use crate::anchor::{Anchor, GaussianKey};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::par::{self, Execution};
use crate::scene::Scene;
use crate::temporal::MotionModel;

/// Head indices into [`MlpStack::heads`]; also the serialization order.
pub const OPACITY_HEAD: usize = 0;
pub const SHAPE_HEAD: usize = 1;
pub const COLOR_HEAD: usize = 2;
pub const VELOCITY_HEAD: usize = 3;

/// Per-slot width of the shape head: quaternion 4, scale 3, temporal scale 1.
pub const SHAPE_WIDTH: usize = 8;

const ANCHOR_CHUNK: usize = 32;

/// Output initialization of the heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpInit {
    pub hidden: usize,
    /// Pre-tanh opacity bias.
    pub opacity_bias: f64,
    /// Initial Gaussian scale in scene units.
    pub scale: f64,
    /// Initial inverse temporal scale.
    pub inv_temporal_scale: f64,
    /// Output-layer weight range relative to `1/√hidden`.
    pub out_scale: f64,
}

impl Default for MlpInit {
    fn default() -> Self {
        MlpInit {
            hidden: 32,
            opacity_bias: 0.1,
            scale: 0.01,
            inv_temporal_scale: 1.0,
            out_scale: 0.1,
        }
    }
}

/// Opacity, shape, color and velocity heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    pub heads: [Mlp; 4],
    pub k: usize,
    pub feature_dim: usize,
    pub motion: MotionModel,
}

impl MlpStack {
    pub fn zeros(feature_dim: usize, hidden: usize, k: usize, motion: MotionModel) -> Self {
        MlpStack {
            heads: [
                Mlp::zeros(feature_dim, hidden, k),
                Mlp::zeros(feature_dim, hidden, k * SHAPE_WIDTH),
                Mlp::zeros(feature_dim + 3, hidden, k * 3),
                Mlp::zeros(feature_dim, hidden, k * 3 * motion.degree()),
            ],
            k,
            feature_dim,
            motion,
        }
    }

    pub fn init<R: Rng>(
        feature_dim: usize,
        k: usize,
        motion: MotionModel,
        init: &MlpInit,
        rng: &mut R,
    ) -> Self {
        let mut s = Self::zeros(feature_dim, init.hidden, k, motion);
        for h in &mut s.heads {
            h.init(init.out_scale, rng);
        }
        for b in s.heads[OPACITY_HEAD].b2_mut() {
            *b = init.opacity_bias;
        }
        let ln_scale = init.scale.ln();
        let ln_inv_t = init.inv_temporal_scale.ln();
        for slot in s.heads[SHAPE_HEAD].b2_mut().chunks_exact_mut(SHAPE_WIDTH) {
            slot.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, ln_scale, ln_scale, ln_scale, ln_inv_t]);
        }
        s
    }

    pub fn hidden(&self) -> usize {
        self.heads[0].n_hidden
    }

    /// Activated invariant scalars per slot: `ρ, q(4), s(3), σ_inv, motion`.
    pub fn invariant_stride(&self) -> usize {
        1 + SHAPE_WIDTH + 3 * self.motion.degree()
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Mlp::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(Mlp::param_count).sum()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            heads: std::array::from_fn(|i| vec![0.0; self.heads[i].param_count()]),
        }
    }
}

/// Gradients shaped like [`MlpStack`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub heads: [Vec<f64>; 4],
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// A spawned Gaussian with activated properties.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGaussian4D {
    pub key: GaussianKey,
    /// Index of the owning anchor in the scene's anchor list.
    pub anchor_index: usize,
    /// Canonical `(x, y, z, t)` = anchor position + offset.
    pub position: [f64; 4],
    /// Base opacity `ρ ∈ (−1, 1)`.
    pub opacity: f64,
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub inv_temporal_scale: f64,
    /// Motion coefficients, `3·degree` used.
    pub motion: [f64; 9],
    pub motion_degree: usize,
    pub color: Vector3<f64>,
}

impl NeuralGaussian4D {
    pub fn motion_coeffs(&self) -> &[f64] {
        &self.motion[..3 * self.motion_degree]
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.motion[0], self.motion[1], self.motion[2])
    }

    pub fn temporal_scale(&self) -> f64 {
        1.0 / self.inv_temporal_scale
    }
}

/// Upstream gradient for every property of a [`NeuralGaussian4D`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub position: [f64; 4],
    pub opacity: f64,
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub inv_temporal_scale: f64,
    pub motion: [f64; 9],
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        self.position.iter().all(|&v| v == 0.0)
            && self.opacity == 0.0
            && self.rotation.iter().all(|&v| v == 0.0)
            && self.scale.iter().all(|&v| v == 0.0)
            && self.inv_temporal_scale == 0.0
            && self.motion.iter().all(|&v| v == 0.0)
            && self.color.iter().all(|&v| v == 0.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unit vector from the camera center to the anchor's spatial position.
pub fn view_direction(anchor: &Anchor, camera_center: &Vector3<f64>) -> Vector3<f64> {
    let d = Vector3::new(anchor.position[0], anchor.position[1], anchor.position[2]) - camera_center;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Scratch buffers for the heads of one anchor.
struct HeadScratch {
    hidden: [Vec<f64>; 4],
    raw: [Vec<f64>; 4],
    color_in: Vec<f64>,
}

impl HeadScratch {
    fn new(m: &MlpStack) -> Self {
        HeadScratch {
            hidden: std::array::from_fn(|_| vec![0.0; m.hidden()]),
            raw: std::array::from_fn(|i| vec![0.0; m.heads[i].n_out]),
            color_in: vec![0.0; m.feature_dim + 3],
        }
    }

    fn forward_invariant(&mut self, m: &MlpStack, feature: &[f64]) {
        for h in [OPACITY_HEAD, SHAPE_HEAD, VELOCITY_HEAD] {
            m.heads[h].forward(feature, &mut self.hidden[h], &mut self.raw[h]);
        }
    }

    fn forward_color(&mut self, m: &MlpStack, feature: &[f64], view_dir: &Vector3<f64>) {
        self.color_in[..m.feature_dim].copy_from_slice(feature);
        self.color_in[m.feature_dim..].copy_from_slice(view_dir.as_slice());
        m.heads[COLOR_HEAD].forward(&self.color_in, &mut self.hidden[COLOR_HEAD], &mut self.raw[COLOR_HEAD]);
    }

    /// Activated invariant values into `out` (`k × stride`).
    fn write_invariant(&self, m: &MlpStack, out: &mut [f64]) {
        let stride = m.invariant_stride();
        let deg3 = 3 * m.motion.degree();
        for (slot, o) in out.chunks_exact_mut(stride).enumerate() {
            o[0] = self.raw[OPACITY_HEAD][slot].tanh();
            let sh = &self.raw[SHAPE_HEAD][slot * SHAPE_WIDTH..(slot + 1) * SHAPE_WIDTH];
            o[1..5].copy_from_slice(&sh[..4]);
            for i in 0..3 {
                o[5 + i] = sh[4 + i].exp();
            }
            o[8] = sh[7].exp();
            o[9..9 + deg3].copy_from_slice(&self.raw[VELOCITY_HEAD][slot * deg3..(slot + 1) * deg3]);
        }
    }
}

fn assemble(
    anchor: &Anchor,
    index: usize,
    m: &MlpStack,
    invariant: &[f64],
    color_raw: &[f64],
    out: &mut Vec<NeuralGaussian4D>,
) {
    let stride = m.invariant_stride();
    let deg = m.motion.degree();
    for slot in 0..m.k {
        let v = &invariant[slot * stride..(slot + 1) * stride];
        let mut motion = [0.0; 9];
        motion[..3 * deg].copy_from_slice(&v[9..9 + 3 * deg]);
        let c = &color_raw[slot * 3..slot * 3 + 3];
        out.push(NeuralGaussian4D {
            key: GaussianKey {
                anchor: anchor.id,
                slot: slot as u32,
            },
            anchor_index: index,
            position: anchor.gaussian_position(slot),
            opacity: v[0],
            rotation: [v[1], v[2], v[3], v[4]],
            scale: Vector3::new(v[5], v[6], v[7]),
            inv_temporal_scale: v[8],
            motion,
            motion_degree: deg,
            color: Vector3::new(sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])),
        });
    }
}

/// Spawns the `K` Gaussians of one anchor. Only the color head sees
/// `view_dir`.
pub fn spawn(
    anchor: &Anchor,
    anchor_index: usize,
    view_dir: &Vector3<f64>,
    mlps: &MlpStack,
) -> Result<Vec<NeuralGaussian4D>> {
    if !mlps.is_finite() {
        return Err(Error::invalid("non-finite MLP weights"));
    }
    if anchor.feature.len() != mlps.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: format!("feature of length {}", mlps.feature_dim),
            actual: format!("{}", anchor.feature.len()),
        });
    }
    let mut s = HeadScratch::new(mlps);
    let mut out = Vec::with_capacity(mlps.k);
    spawn_into(anchor, anchor_index, view_dir, mlps, None, &mut s, &mut out);
    Ok(out)
}

fn spawn_into(
    anchor: &Anchor,
    index: usize,
    view_dir: &Vector3<f64>,
    m: &MlpStack,
    cached: Option<&[f64]>,
    s: &mut HeadScratch,
    out: &mut Vec<NeuralGaussian4D>,
) {
    let mut local;
    let invariant = match cached {
        Some(c) => c,
        None => {
            s.forward_invariant(m, &anchor.feature);
            local = vec![0.0; m.k * m.invariant_stride()];
            s.write_invariant(m, &mut local);
            &local[..]
        }
    };
    s.forward_color(m, &anchor.feature, view_dir);
    assemble(anchor, index, m, invariant, &s.raw[COLOR_HEAD], out);
}

/// Gradients reaching one anchor's own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub feature: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

/// Reverse pass of [`spawn`] for one anchor; MLP gradients are added to
/// `mlp_grads`.
pub fn spawn_backward(
    anchor: &Anchor,
    view_dir: &Vector3<f64>,
    mlps: &MlpStack,
    upstream: &[GaussianGrad],
    mlp_grads: &mut MlpGrads,
) -> AnchorGrad {
    let mut s = HeadScratch::new(mlps);
    spawn_backward_with(anchor, view_dir, mlps, upstream, mlp_grads, &mut s)
}

fn spawn_backward_with(
    anchor: &Anchor,
    view_dir: &Vector3<f64>,
    m: &MlpStack,
    upstream: &[GaussianGrad],
    mlp_grads: &mut MlpGrads,
    s: &mut HeadScratch,
) -> AnchorGrad {
    assert_eq!(upstream.len(), m.k);
    s.forward_invariant(m, &anchor.feature);
    s.forward_color(m, &anchor.feature, view_dir);
    let deg3 = 3 * m.motion.degree();

    let mut d_raw: [Vec<f64>; 4] = std::array::from_fn(|i| vec![0.0; m.heads[i].n_out]);
    for (slot, g) in upstream.iter().enumerate() {
        let rho = s.raw[OPACITY_HEAD][slot].tanh();
        d_raw[OPACITY_HEAD][slot] = g.opacity * (1.0 - rho * rho);

        let sh = &s.raw[SHAPE_HEAD][slot * SHAPE_WIDTH..(slot + 1) * SHAPE_WIDTH];
        let d = &mut d_raw[SHAPE_HEAD][slot * SHAPE_WIDTH..(slot + 1) * SHAPE_WIDTH];
        d[..4].copy_from_slice(&g.rotation);
        for i in 0..3 {
            d[4 + i] = g.scale[i] * sh[4 + i].exp();
        }
        d[7] = g.inv_temporal_scale * sh[7].exp();

        for i in 0..3 {
            let c = sigmoid(s.raw[COLOR_HEAD][slot * 3 + i]);
            d_raw[COLOR_HEAD][slot * 3 + i] = g.color[i] * c * (1.0 - c);
        }
        d_raw[VELOCITY_HEAD][slot * deg3..(slot + 1) * deg3].copy_from_slice(&g.motion[..deg3]);
    }

    let mut d_feature = vec![0.0; m.feature_dim];
    for h in [OPACITY_HEAD, SHAPE_HEAD, VELOCITY_HEAD] {
        m.heads[h].backward(&anchor.feature, &s.hidden[h], &d_raw[h], &mut mlp_grads.heads[h], &mut d_feature);
    }
    let mut d_color_in = vec![0.0; m.feature_dim + 3];
    m.heads[COLOR_HEAD].backward(
        &s.color_in,
        &s.hidden[COLOR_HEAD],
        &d_raw[COLOR_HEAD],
        &mut mlp_grads.heads[COLOR_HEAD],
        &mut d_color_in,
    );
    for (f, c) in d_feature.iter_mut().zip(&d_color_in) {
        *f += c;
    }
    AnchorGrad {
        feature: d_feature,
        offsets: upstream.iter().map(|g| g.position).collect(),
    }
}

/// Precomputed opacity, shape and velocity head outputs for every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceCache {
    version: u64,
    stride: usize,
    k: usize,
    values: Vec<f64>,
}

impl InferenceCache {
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of cached activated scalars.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, scene: &Scene) -> Result<()> {
        if self.version != scene.version() {
            return Err(Error::StaleCache {
                cache: self.version,
                scene: scene.version(),
            });
        }
        Ok(())
    }

    fn anchor(&self, index: usize) -> &[f64] {
        let n = self.k * self.stride;
        &self.values[index * n..(index + 1) * n]
    }
}

pub fn build_inference_cache(scene: &Scene) -> InferenceCache {
    let m = scene.mlps();
    let stride = m.invariant_stride();
    let mut values = vec![0.0; scene.anchors().len() * m.k * stride];
    let mut s = HeadScratch::new(m);
    for (a, out) in scene.anchors().iter().zip(values.chunks_exact_mut(m.k * stride)) {
        s.forward_invariant(m, &a.feature);
        s.write_invariant(m, out);
    }
    InferenceCache {
        version: scene.version(),
        stride,
        k: m.k,
        values,
    }
}

/// Base opacities `ρ` of every Gaussian, anchor-major.
pub fn base_opacities(scene: &Scene) -> Vec<f64> {
    let m = scene.mlps();
    let mut s = HeadScratch::new(m);
    let mut out = Vec::with_capacity(scene.anchors().gaussian_count());
    for a in scene.anchors().iter() {
        m.heads[OPACITY_HEAD].forward(&a.feature, &mut s.hidden[OPACITY_HEAD], &mut s.raw[OPACITY_HEAD]);
        out.extend(s.raw[OPACITY_HEAD].iter().map(|r| r.tanh()));
    }
    out
}

/// Spawns every anchor's Gaussians for a camera at `camera_center`, in
/// anchor-major order.
pub fn spawn_scene(
    scene: &Scene,
    camera_center: &Vector3<f64>,
    cache: Option<&InferenceCache>,
    exec: Execution,
) -> Result<Vec<NeuralGaussian4D>> {
    let m = scene.mlps();
    if !m.is_finite() {
        return Err(Error::invalid("non-finite MLP weights"));
    }
    if let Some(c) = cache {
        c.check(scene)?;
    }
    let anchors = scene.anchors().as_slice();
    let chunks = par::map_indexed(exec, par::chunk_count(anchors.len(), ANCHOR_CHUNK), |ci| {
        let start = ci * ANCHOR_CHUNK;
        let end = (start + ANCHOR_CHUNK).min(anchors.len());
        let mut s = HeadScratch::new(m);
        let mut out = Vec::with_capacity((end - start) * m.k);
        for (i, a) in anchors[start..end].iter().enumerate() {
            let idx = start + i;
            let dir = view_direction(a, camera_center);
            spawn_into(a, idx, &dir, m, cache.map(|c| c.anchor(idx)), &mut s, &mut out);
        }
        out
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Gradients for every learnable scene parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    /// `n_anchors × C`.
    pub features: Vec<f64>,
    /// `n_anchors × K × 4`.
    pub offsets: Vec<f64>,
    pub mlps: MlpGrads,
}

impl ParamGrads {
    pub fn zeros(scene: &Scene) -> Self {
        let n = scene.anchors().len();
        ParamGrads {
            features: vec![0.0; n * scene.model().feature_dim],
            offsets: vec![0.0; n * scene.model().k * 4],
            mlps: scene.mlps().zero_grads(),
        }
    }
}

/// Reverse pass of [`spawn_scene`]. `upstream` is anchor-major, one entry per
/// Gaussian. MLP gradients are reduced over fixed anchor chunks in order.
pub fn spawn_scene_backward(
    scene: &Scene,
    camera_center: &Vector3<f64>,
    upstream: &[GaussianGrad],
    exec: Execution,
) -> ParamGrads {
    let m = scene.mlps();
    let k = m.k;
    let c = m.feature_dim;
    let anchors = scene.anchors().as_slice();
    assert_eq!(upstream.len(), anchors.len() * k);
    let mut grads = ParamGrads::zeros(scene);
    let partials = par::map_indexed(exec, par::chunk_count(anchors.len(), ANCHOR_CHUNK), |ci| {
        let start = ci * ANCHOR_CHUNK;
        let end = (start + ANCHOR_CHUNK).min(anchors.len());
        let mut s = HeadScratch::new(m);
        let mut mg = m.zero_grads();
        let mut per_anchor = Vec::new();
        for idx in start..end {
            let up = &upstream[idx * k..(idx + 1) * k];
            if up.iter().all(GaussianGrad::is_zero) {
                continue;
            }
            let a = &anchors[idx];
            let dir = view_direction(a, camera_center);
            per_anchor.push((idx, spawn_backward_with(a, &dir, m, up, &mut mg, &mut s)));
        }
        (mg, per_anchor)
    });
    for (mg, per_anchor) in partials {
        grads.mlps.add_assign(&mg);
        for (idx, ag) in per_anchor {
            grads.features[idx * c..(idx + 1) * c].copy_from_slice(&ag.feature);
            for (slot, o) in ag.offsets.iter().enumerate() {
                grads.offsets[(idx * k + slot) * 4..(idx * k + slot) * 4 + 4].copy_from_slice(o);
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::{AnchorSet, VoxelGrid4D};
    use crate::scene::ModelConfig;
    use crate::temporal::{slice_to_3d, ShapeExponent, TemporalOpacity};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(k: usize, c: usize, motion: MotionModel, seed: u64) -> MlpStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MlpStack::init(c, k, motion, &MlpInit { hidden: 6, out_scale: 1.0, ..Default::default() }, &mut rng);
        for h in &mut m.heads {
            for b in h.b2_mut() {
                *b += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    fn random_anchor(id: u64, k: usize, c: usize, rng: &mut ChaCha8Rng) -> Anchor {
        Anchor {
            id,
            position: [rng.gen(), rng.gen(), rng.gen(), rng.gen()],
            feature: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            offsets: (0..k).map(|_| [rng.gen_range(-0.1..0.1), 0.02, -0.03, 0.01]).collect(),
        }
    }

    #[test]
    fn architecture_sizes() {
        let m = MlpStack::zeros(32, 32, 10, MotionModel::Linear);
        let sizes: Vec<_> = m.heads.iter().map(|h| (h.n_in, h.n_hidden, h.n_out)).collect();
        assert_eq!(sizes, vec![(32, 32, 10), (32, 32, 80), (35, 32, 30), (32, 32, 30)]);
        assert_eq!(m.param_count(), 3 * 32 * 32 + 35 * 32 + 4 * 32 + 32 * (10 + 80 + 30 + 30) + 10 + 80 + 30 + 30);
        let p = MlpStack::zeros(32, 32, 10, MotionModel::Polynomial);
        assert_eq!(p.heads[VELOCITY_HEAD].n_out, 90);
    }

    #[test]
    fn zero_network_defaults() {
        let m = MlpStack::zeros(32, 32, 10, MotionModel::Linear);
        let a = Anchor { id: 0, position: [0.0; 4], feature: vec![0.0; 32], offsets: vec![[0.0; 4]; 10] };
        let gs = spawn(&a, 0, &Vector3::new(0.0, 0.0, 1.0), &m).unwrap();
        assert_eq!(gs.len(), 10);
        for g in gs {
            assert_eq!(g.opacity, 0.0);
            assert_eq!(g.scale, Vector3::new(1.0, 1.0, 1.0));
            assert_eq!(g.color, Vector3::new(0.5, 0.5, 0.5));
            assert_eq!(g.inv_temporal_scale, 1.0);
            assert_eq!(g.velocity(), Vector3::zeros());
        }
    }

    #[test]
    fn view_dir_changes_only_color() {
        let m = random_stack(4, 5, MotionModel::Linear, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_anchor(0, 4, 5, &mut rng);
        let g1 = spawn(&a, 0, &Vector3::new(0.0, 0.0, 1.0), &m).unwrap();
        let g2 = spawn(&a, 0, &Vector3::new(0.6, 0.0, 0.8), &m).unwrap();
        let mut any_color_change = false;
        for (x, y) in g1.iter().zip(&g2) {
            assert_eq!(x.opacity, y.opacity);
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.scale, y.scale);
            assert_eq!(x.inv_temporal_scale, y.inv_temporal_scale);
            assert_eq!(x.motion, y.motion);
            assert_eq!(x.position, y.position);
            any_color_change |= x.color != y.color;
        }
        assert!(any_color_change);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = MlpStack::zeros(4, 4, 2, MotionModel::Linear);
        m.heads[SHAPE_HEAD].params[3] = f64::NAN;
        let a = Anchor { id: 0, position: [0.0; 4], feature: vec![0.0; 4], offsets: vec![[0.0; 4]; 2] };
        assert!(spawn(&a, 0, &Vector3::new(0.0, 0.0, 1.0), &m).is_err());
    }

    #[test]
    fn spawn_and_slice_positions() {
        let m = random_stack(3, 4, MotionModel::Linear, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_anchor(0, 3, 4, &mut rng);
        let gs = spawn(&a, 0, &Vector3::new(0.0, 0.0, 1.0), &m).unwrap();
        let op = TemporalOpacity::default();
        for (slot, g) in gs.iter().enumerate() {
            for i in 0..4 {
                assert_eq!(g.position[i], a.position[i] + a.offsets[slot][i]);
            }
            // At the temporal center the slice is the canonical Gaussian.
            let s = slice_to_3d(g, g.position[3], &op);
            assert_eq!(s.gaussian.center, Vector3::new(g.position[0], g.position[1], g.position[2]));
            assert_eq!(s.gaussian.opacity, g.opacity);
            let (t1, t2) = (0.1, 0.85);
            let d = slice_to_3d(g, t2, &op).gaussian.center - slice_to_3d(g, t1, &op).gaussian.center;
            assert!((d - (t2 - t1) * g.velocity()).norm() < 1e-12);
        }
    }

    #[test]
    fn slice_opacity_product_and_static() {
        let mut g = NeuralGaussian4D {
            key: GaussianKey { anchor: 0, slot: 0 },
            anchor_index: 0,
            position: [1.0, 2.0, 3.0, 0.5],
            opacity: 0.8,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(1.0, 1.0, 1.0),
            inv_temporal_scale: 0.0,
            motion: [0.0; 9],
            motion_degree: 1,
            color: Vector3::zeros(),
        };
        // g = 0.5 ⇔ (Δ·σ_inv)² = ln 2 with β = 2.
        g.inv_temporal_scale = (2.0f64.ln()).sqrt() / 0.25;
        let s = slice_to_3d(&g, 0.75, &TemporalOpacity::default());
        assert_relative_eq!(s.gaussian.opacity, 0.4, epsilon = 1e-15);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(slice_to_3d(&g, t, &TemporalOpacity::default()).gaussian.center, Vector3::new(1.0, 2.0, 3.0));
        }
    }

    fn all_props_objective(gs: &[NeuralGaussian4D], w: &[GaussianGrad]) -> f64 {
        let mut acc = 0.0;
        for (g, w) in gs.iter().zip(w) {
            acc += (0..4).map(|i| g.position[i] * w.position[i]).sum::<f64>();
            acc += g.opacity * w.opacity;
            acc += (0..4).map(|i| g.rotation[i] * w.rotation[i]).sum::<f64>();
            acc += g.scale.dot(&w.scale);
            acc += g.inv_temporal_scale * w.inv_temporal_scale;
            acc += (0..9).map(|i| g.motion[i] * w.motion[i]).sum::<f64>();
            acc += g.color.dot(&w.color);
        }
        acc
    }

    fn random_upstream(k: usize, deg: usize, rng: &mut ChaCha8Rng) -> Vec<GaussianGrad> {
        (0..k)
            .map(|_| {
                let mut g = GaussianGrad {
                    position: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    opacity: rng.gen_range(-1.0..1.0),
                    rotation: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    scale: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    inv_temporal_scale: rng.gen_range(-1.0..1.0),
                    motion: [0.0; 9],
                    color: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                };
                for v in &mut g.motion[..3 * deg] {
                    *v = rng.gen_range(-1.0..1.0);
                }
                g
            })
            .collect()
    }

    fn check_backward(motion: MotionModel) {
        let (k, c) = (3, 5);
        let m = random_stack(k, c, motion, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_anchor(0, k, c, &mut rng);
        let dir = Vector3::new(0.3, -0.2, 0.9).normalize();
        let up = random_upstream(k, motion.degree(), &mut rng);
        let mut mg = m.zero_grads();
        let ag = spawn_backward(&a, &dir, &m, &up, &mut mg);
        let f = |a: &Anchor, m: &MlpStack| all_props_objective(&spawn(a, 0, &dir, m).unwrap(), &up);
        let eps = 1e-5;
        let close = |an: f64, fd: f64| (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3);
        for h in 0..4 {
            for p in 0..m.heads[h].param_count() {
                let (mut mp, mut mm) = (m.clone(), m.clone());
                mp.heads[h].params[p] += eps;
                mm.heads[h].params[p] -= eps;
                let fd = (f(&a, &mp) - f(&a, &mm)) / (2.0 * eps);
                assert!(close(mg.heads[h][p], fd), "head {h} param {p}: {} vs {fd}", mg.heads[h][p]);
            }
        }
        for i in 0..c {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap.feature[i] += eps;
            am.feature[i] -= eps;
            let fd = (f(&ap, &m) - f(&am, &m)) / (2.0 * eps);
            assert!(close(ag.feature[i], fd), "feature {i}");
        }
        for slot in 0..k {
            for i in 0..4 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap.offsets[slot][i] += eps;
                am.offsets[slot][i] -= eps;
                let fd = (f(&ap, &m) - f(&am, &m)) / (2.0 * eps);
                assert!(close(ag.offsets[slot][i], fd));
                // Positions are additive in the offsets.
                assert_eq!(ag.offsets[slot][i], up[slot].position[i]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_linear() {
        check_backward(MotionModel::Linear);
    }

    #[test]
    fn backward_matches_finite_differences_polynomial() {
        check_backward(MotionModel::Polynomial);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = random_stack(3, 5, MotionModel::Linear, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_anchor(0, 3, 5, &mut rng);
        let mut mg = m.zero_grads();
        let ag = spawn_backward(&a, &Vector3::new(0.0, 0.0, 1.0), &m, &[GaussianGrad::default(); 3], &mut mg);
        assert!(ag.feature.iter().all(|&v| v == 0.0));
        assert!(mg.heads.iter().flatten().all(|&v| v == 0.0));
    }

    fn small_scene(seed: u64, n: usize) -> Scene {
        let (k, c) = (3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = AnchorSet::new(k, c);
        for _ in 0..n {
            let a = random_anchor(0, k, c, &mut rng);
            set.push(a.position, a.feature, a.offsets);
        }
        let model = ModelConfig { k, feature_dim: c, ..ModelConfig::default() };
        Scene::new(model, set, VoxelGrid4D::new(1.0, 1.0).unwrap(), random_stack(k, c, MotionModel::Linear, seed + 1))
    }

    #[test]
    fn cache_matches_and_goes_stale() {
        let mut scene = small_scene(20, 40);
        let cam = Vector3::new(0.1, -3.0, 0.4);
        let cache = build_inference_cache(&scene);
        assert_eq!(cache.len(), 40 * 3 * (1 + 8 + 3));
        let a = spawn_scene(&scene, &cam, None, Execution::Sequential).unwrap();
        let b = spawn_scene(&scene, &cam, Some(&cache), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        scene.mlps_mut().heads[0].params[0] += 1e-3;
        assert!(matches!(
            spawn_scene(&scene, &cam, Some(&cache), Execution::Sequential),
            Err(Error::StaleCache { .. })
        ));
    }

    proptest! {
        #[test]
        fn activation_ranges(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = random_stack(4, 5, MotionModel::Linear, seed);
            for h in &mut m.heads {
                for p in &mut h.params { *p *= scale; }
            }
            let a = random_anchor(0, 4, 5, &mut rng);
            for g in spawn(&a, 0, &Vector3::new(0.0, 1.0, 0.0), &m).unwrap() {
                prop_assert!(g.opacity >= -1.0 && g.opacity <= 1.0);
                prop_assert!(g.scale.iter().all(|&s| s >= 0.0));
                prop_assert!(g.inv_temporal_scale >= 0.0);
                prop_assert!(g.color.iter().all(|&c| (0.0..=1.0).contains(&c)));
            }
        }

        #[test]
        fn permuting_anchors_permutes_gaussians(seed in 0u64..200) {
            let scene = small_scene(seed, 6);
            let cam = Vector3::new(0.0, 0.0, -4.0);
            let gs = spawn_scene(&scene, &cam, None, Execution::Sequential).unwrap();
            let k = scene.model().k;
            for (idx, a) in scene.anchors().iter().enumerate().rev() {
                let dir = view_direction(a, &cam);
                let single = spawn(a, idx, &dir, scene.mlps()).unwrap();
                prop_assert_eq!(&single[..], &gs[idx * k..(idx + 1) * k]);
            }
        }
    }

    #[test]
    fn scene_backward_is_execution_independent() {
        let scene = small_scene(30, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let up: Vec<_> = (0..70).flat_map(|_| random_upstream(3, 1, &mut rng)).collect();
        let cam = Vector3::new(0.0, 0.0, -4.0);
        let a = spawn_scene_backward(&scene, &cam, &up, Execution::Sequential);
        let b = spawn_scene_backward(&scene, &cam, &up, Execution::Parallel);
        assert_eq!(a, b);
        let _ = ShapeExponent::default();
    }
}
