//! A trainable scene: anchors, their occupancy grid and the shared MLPs.

use serde::{Deserialize, Serialize};

use crate::anchor::{prune_invalid_anchors, AnchorSet, VoxelGrid4D};
use crate::spawn::{base_opacities, MlpStack};
use crate::temporal::{MotionModel, OpacityModel, ShapeExponent, TemporalOpacity};

/// Architecture and temporal model choices fixed for the lifetime of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub exponent: ShapeExponent,
    pub opacity_model: OpacityModel,
    pub motion_model: MotionModel,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 10,
            feature_dim: 32,
            hidden: 32,
            exponent: ShapeExponent::default(),
            opacity_model: OpacityModel::Generalized,
            motion_model: MotionModel::Linear,
        }
    }
}

impl ModelConfig {
    pub fn temporal_opacity(&self) -> TemporalOpacity {
        TemporalOpacity {
            model: self.opacity_model,
            exponent: self.exponent,
        }
    }
}

/// Mutable access through `*_mut` bumps [`Scene::version`], which guards
/// inference caches against stale parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    model: ModelConfig,
    anchors: AnchorSet,
    grid: VoxelGrid4D,
    mlps: MlpStack,
    version: u64,
}

impl Scene {
    pub fn new(model: ModelConfig, anchors: AnchorSet, grid: VoxelGrid4D, mlps: MlpStack) -> Self {
        assert_eq!(anchors.k, model.k);
        assert_eq!(anchors.feature_dim, model.feature_dim);
        assert_eq!(mlps.k, model.k);
        assert_eq!(mlps.feature_dim, model.feature_dim);
        assert_eq!(mlps.motion, model.motion_model);
        Scene {
            model,
            anchors,
            grid,
            mlps,
            version: 0,
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn grid(&self) -> &VoxelGrid4D {
        &self.grid
    }

    pub fn mlps(&self) -> &MlpStack {
        &self.mlps
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn temporal_opacity(&self) -> TemporalOpacity {
        self.model.temporal_opacity()
    }

    pub fn anchors_mut(&mut self) -> &mut AnchorSet {
        self.version += 1;
        &mut self.anchors
    }

    pub fn mlps_mut(&mut self) -> &mut MlpStack {
        self.version += 1;
        &mut self.mlps
    }

    pub fn parts_mut(&mut self) -> (&mut AnchorSet, &mut VoxelGrid4D, &mut MlpStack) {
        self.version += 1;
        (&mut self.anchors, &mut self.grid, &mut self.mlps)
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.gaussian_count()
    }

    /// Removes anchors whose Gaussians all have negative base opacity.
    pub fn prune_invalid(&mut self) -> Vec<u64> {
        let rho = base_opacities(self);
        let removed = prune_invalid_anchors(&mut self.anchors, &mut self.grid, &rho);
        if !removed.is_empty() {
            self.version += 1;
        }
        removed
    }

    /// Rounds every learnable parameter through `f32`, the storage precision.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        for a in self.anchors.as_mut_slice() {
            a.position.iter_mut().for_each(q);
            a.feature.iter_mut().for_each(q);
            a.offsets.iter_mut().flatten().for_each(q);
        }
        for h in &mut self.mlps.heads {
            h.params.iter_mut().for_each(q);
        }
        self.version += 1;
    }
}
