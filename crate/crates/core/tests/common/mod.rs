#![allow(dead_code)]

use a4dg::anchor::{AnchorSet, VoxelGrid4D};
use a4dg::geometry::Camera;
use a4dg::image::Image;
use a4dg::loss::{frame_loss, LossWeights};
use a4dg::render::{render, RenderConfig};
use a4dg::scene::{ModelConfig, Scene};
use a4dg::spawn::{MlpInit, MlpStack};
use a4dg::temporal::{MotionModel, OpacityModel, ShapeExponent};
use a4dg::train::loss_and_grads;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scene of at most ten Gaussians seen by an 8×8 camera, with a random
/// target image.
pub struct MicroScene {
    pub scene: Scene,
    pub camera: Camera,
    pub t: f64,
    pub target: Image,
}

pub fn micro_scene(seed: u64) -> MicroScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_anchors = rng.gen_range(1..=2usize);
    let k = rng.gen_range(2..=10 / n_anchors);
    let c = 4;
    let motion = if seed % 2 == 0 { MotionModel::Linear } else { MotionModel::Polynomial };
    let opacity_model = if seed % 3 == 0 { OpacityModel::Gaussian4dgs } else { OpacityModel::Generalized };
    let beta = [2.0, 4.0][rng.gen_range(0..2)];
    let init = MlpInit {
        hidden: 5,
        opacity_bias: 0.9,
        scale: 0.35,
        inv_temporal_scale: 1.5,
        out_scale: 0.3,
    };
    let mlps = MlpStack::init(c, k, motion, &init, &mut rng);
    let mut set = AnchorSet::new(k, c);
    for _ in 0..n_anchors {
        let pos = [
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.2..0.8),
        ];
        let feature = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offsets = (0..k)
            .map(|_| {
                [
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.2..0.2),
                ]
            })
            .collect();
        set.push(pos, feature, offsets);
    }
    let model = ModelConfig {
        k,
        feature_dim: c,
        hidden: 5,
        exponent: ShapeExponent::from_beta(beta).unwrap(),
        opacity_model,
        motion_model: motion,
    };
    let scene = Scene::new(model, set, VoxelGrid4D::new(0.5, 0.25).unwrap(), mlps);
    let eye = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), -3.0);
    let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 1.0, 8, 8, 0.1, 20.0).unwrap();
    let target = Image::from_data(8, 8, 3, (0..192).map(|_| rng.gen()).collect()).unwrap();
    MicroScene {
        scene,
        camera,
        t: rng.gen_range(0.3..0.7),
        target,
    }
}

pub fn micro_loss(m: &MicroScene, scene: &Scene, w: &LossWeights, cfg: &RenderConfig) -> f64 {
    let out = render(scene, &m.camera, m.t, cfg).unwrap();
    frame_loss(&out.image, &m.target, &out.frame.splats, w).unwrap().0.total
}

/// Worst relative error between analytic and central-difference gradients
/// over every learnable parameter, with the parameter count.
pub struct GradCheck {
    pub params: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

/// Gradients below this magnitude are compared in absolute terms, scaled by it.
pub const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

pub fn check_micro_gradients(m: &MicroScene, eps: f64) -> GradCheck {
    let w = LossWeights::default();
    let cfg = RenderConfig::exact();
    let analytic = loss_and_grads(&m.scene, &m.camera, m.t, &m.target, &w, &cfg).unwrap().grads;
    let mut out = GradCheck {
        params: 0,
        worst_rel: 0.0,
        worst_at: String::new(),
    };
    let mut record = |name: String, a: f64, n: f64| {
        out.params += 1;
        let e = rel_err(a, n);
        if e > out.worst_rel {
            out.worst_rel = e;
            out.worst_at = format!("{name}: analytic {a:e}, numeric {n:e}");
        }
    };
    let central = |perturb: &dyn Fn(&mut Scene, f64)| {
        let mut s = m.scene.clone();
        perturb(&mut s, eps);
        let lp = micro_loss(m, &s, &w, &cfg);
        let mut s = m.scene.clone();
        perturb(&mut s, -eps);
        let lm = micro_loss(m, &s, &w, &cfg);
        (lp - lm) / (2.0 * eps)
    };
    let c = m.scene.model().feature_dim;
    let k = m.scene.model().k;
    for a in 0..m.scene.anchors().len() {
        for j in 0..c {
            let n = central(&|s: &mut Scene, d| s.anchors_mut().as_mut_slice()[a].feature[j] += d);
            record(format!("feature[{a}][{j}]"), analytic.features[a * c + j], n);
        }
        for slot in 0..k {
            for d4 in 0..4 {
                let n = central(&|s: &mut Scene, d| s.anchors_mut().as_mut_slice()[a].offsets[slot][d4] += d);
                record(format!("offset[{a}][{slot}][{d4}]"), analytic.offsets[(a * k + slot) * 4 + d4], n);
            }
        }
    }
    for h in 0..4 {
        for p in 0..m.scene.mlps().heads[h].params.len() {
            let n = central(&|s: &mut Scene, d| s.mlps_mut().heads[h].params[p] += d);
            record(format!("head[{h}][{p}]"), analytic.mlps.heads[h][p], n);
        }
    }
    out
}
