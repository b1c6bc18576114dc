//! Adam with per-group learning-rate schedules. Anchor-owned state is kept
//! row-aligned with the anchor list across growing and pruning.

use serde::{Deserialize, Serialize};

use crate::scene::Scene;
use crate::spawn::ParamGrads;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Learning rate decaying exponentially from `initial` to
/// `initial · final_factor` over `steps` steps, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            final_factor: 1.0,
        }
    }

    pub fn at(&self, step: u64, steps: u64) -> f64 {
        if self.initial == 0.0 {
            return 0.0;
        }
        let f = if steps == 0 { 1.0 } else { (step as f64 / steps as f64).min(1.0) };
        self.initial * self.final_factor.powf(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub offsets: LrSchedule,
    pub features: LrSchedule,
    pub mlps: LrSchedule,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            offsets: LrSchedule {
                initial: 1e-2,
                final_factor: 0.01,
            },
            features: LrSchedule::constant(7.5e-3),
            mlps: LrSchedule {
                initial: 2e-3,
                final_factor: 0.1,
            },
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            offsets: LrSchedule::constant(0.0),
            features: LrSchedule::constant(0.0),
            mlps: LrSchedule::constant(0.0),
        }
    }
}

/// First and second moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64, cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }

    fn extend_rows(&mut self, n: usize) {
        self.m.resize(self.m.len() + n, 0.0);
        self.v.resize(self.v.len() + n, 0.0);
    }

    fn retain_rows(&mut self, keep: &[bool], row: usize) {
        let filter = |x: &mut Vec<f64>| {
            *x = x
                .chunks_exact(row)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub rates: LearningRates,
    /// Length of the decay schedules.
    pub total_steps: u64,
    pub step: u64,
    pub features: Moments,
    pub offsets: Moments,
    pub mlps: [Moments; 4],
    feature_dim: usize,
    k: usize,
}

impl OptimizerState {
    pub fn new(scene: &Scene, config: AdamConfig, rates: LearningRates, total_steps: u64) -> Self {
        let n = scene.anchors().len();
        let (c, k) = (scene.model().feature_dim, scene.model().k);
        OptimizerState {
            config,
            rates,
            total_steps,
            step: 0,
            features: Moments::zeros(n * c),
            offsets: Moments::zeros(n * k * 4),
            mlps: std::array::from_fn(|i| Moments::zeros(scene.mlps().heads[i].param_count())),
            feature_dim: c,
            k,
        }
    }

    /// Learning rates `(offsets, features, mlps)` at the current step.
    pub fn current_rates(&self) -> (f64, f64, f64) {
        (
            self.rates.offsets.at(self.step, self.total_steps),
            self.rates.features.at(self.step, self.total_steps),
            self.rates.mlps.at(self.step, self.total_steps),
        )
    }

    /// Applies one update to every learnable parameter of `scene`.
    pub fn apply(&mut self, scene: &mut Scene, grads: &ParamGrads) {
        let (lr_off, lr_feat, lr_mlp) = self.current_rates();
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let (c, k) = (self.feature_dim, self.k);
        let (anchors, _, mlps) = scene.parts_mut();

        let mut feats: Vec<f64> = anchors.iter().flat_map(|a| a.feature.iter().copied()).collect();
        self.features.step(&mut feats, &grads.features, lr_feat, t, &cfg);
        let mut offs: Vec<f64> = anchors.iter().flat_map(|a| a.offsets.iter().flatten().copied()).collect();
        self.offsets.step(&mut offs, &grads.offsets, lr_off, t, &cfg);
        for (i, a) in anchors.as_mut_slice().iter_mut().enumerate() {
            a.feature.copy_from_slice(&feats[i * c..(i + 1) * c]);
            for (s, o) in a.offsets.iter_mut().enumerate() {
                o.copy_from_slice(&offs[(i * k + s) * 4..(i * k + s) * 4 + 4]);
            }
        }
        for h in 0..4 {
            self.mlps[h].step(&mut mlps.heads[h].params, &grads.mlps.heads[h], lr_mlp, t, &cfg);
        }
    }

    /// Zero state for `n` newly appended anchors.
    pub fn extend_anchors(&mut self, n: usize) {
        self.features.extend_rows(n * self.feature_dim);
        self.offsets.extend_rows(n * self.k * 4);
    }

    /// Drops the state of anchors whose `keep` flag is false.
    pub fn retain_anchors(&mut self, keep: &[bool]) {
        self.features.retain_rows(keep, self.feature_dim);
        self.offsets.retain_rows(keep, self.k * 4);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = Moments::zeros(3);
        let mut p = vec![1.0, -2.0, 0.5];
        m.step(&mut p, &[0.3, -4.0, 0.0], 0.1, 1, &AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] + 1.9).abs() < 1e-12);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_rate_is_frozen() {
        let mut m = Moments::zeros(2);
        let mut p = vec![1.0, 2.0];
        m.step(&mut p, &[1.0, 1.0], 0.0, 1, &AdamConfig::default());
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut m = Moments::zeros(2);
        let mut p = vec![3.0, -1.0];
        for t in 1..=2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            m.step(&mut p, &g, 0.01, t, &AdamConfig::default());
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { initial: 1e-2, final_factor: 0.01 };
        assert_eq!(s.at(0, 100), 1e-2);
        assert!((s.at(100, 100) - 1e-4).abs() < 1e-18);
        assert!((s.at(50, 100) - 1e-3).abs() < 1e-15);
        assert_eq!(s.at(500, 100), s.at(100, 100));
    }

    #[test]
    fn retain_keeps_rows() {
        let mut m = Moments { m: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], v: vec![0.0; 6] };
        m.retain_rows(&[true, false, true], 2);
        assert_eq!(m.m, vec![1.0, 2.0, 5.0, 6.0]);
        m.extend_rows(2);
        assert_eq!(m.len(), 6);
    }
}
