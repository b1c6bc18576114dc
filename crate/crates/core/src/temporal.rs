//! Time dependence of a neural 4D Gaussian: linear (or polynomial) motion of
//! the center and a generalized-Gaussian temporal opacity window.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Gaussian3D;
use crate::spawn::NeuralGaussian4D;

/// Above this shape exponent training is known to become unstable.
pub const BETA_STABLE_MAX: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpacityModel {
    /// `exp(−(|Δ|·σ_inv)^β)`.
    #[default]
    Generalized,
    /// `exp(−½·Δ²·σ_inv²)`, the univariate form used by earlier 4D splatting.
    Gaussian4dgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// `(t − x_t)·u`.
    #[default]
    Linear,
    /// `Σ_{j=1..3} a_j·(t − x_t)^j`.
    Polynomial,
}

impl MotionModel {
    /// Number of 3-vector coefficients per Gaussian.
    pub fn degree(self) -> usize {
        match self {
            MotionModel::Linear => 1,
            MotionModel::Polynomial => 3,
        }
    }
}

/// Shape exponent, stored as half its value (`β = 2β′`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeExponent {
    half: f64,
}

impl ShapeExponent {
    pub fn from_beta(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::invalid(format!("shape exponent β must be positive, got {beta}")));
        }
        if beta > BETA_STABLE_MAX {
            log::warn!("β = {beta} is above {BETA_STABLE_MAX}; training may be unstable");
        }
        Ok(ShapeExponent { half: beta / 2.0 })
    }

    pub fn beta(self) -> f64 {
        2.0 * self.half
    }

    pub fn half(self) -> f64 {
        self.half
    }

    /// Integer β′ lets the absolute value be dropped: `(z²)^β′`.
    fn integer_half(self) -> Option<i32> {
        (self.half.fract() == 0.0 && self.half <= 64.0).then_some(self.half as i32)
    }
}

impl Default for ShapeExponent {
    fn default() -> Self {
        ShapeExponent { half: 1.0 }
    }
}

/// Temporal parameters of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalParams {
    pub center: f64,
    pub inv_scale: f64,
    pub velocity: Vector3<f64>,
    pub exponent: ShapeExponent,
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inv_scale.is_finite() && self.inv_scale > 0.0) {
            return Err(Error::invalid("inverse temporal scale must be positive"));
        }
        if !self.center.is_finite() || self.velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite temporal parameters"));
        }
        Ok(())
    }
}

pub fn motion_offset(t: f64, x_t: f64, u: &Vector3<f64>) -> Vector3<f64> {
    (t - x_t) * u
}

/// `exp(−(|t − x_t|·σ_inv)^β)`.
pub fn temporal_opacity(t: f64, x_t: f64, inv_scale: f64, beta: ShapeExponent) -> f64 {
    let z = (t - x_t) * inv_scale;
    (-power(z, beta)).exp()
}

fn power(z: f64, beta: ShapeExponent) -> f64 {
    match beta.integer_half() {
        Some(n) => (z * z).powi(n),
        None => z.abs().powf(beta.beta()),
    }
}

/// `d(|z|^β)/dz`.
fn power_derivative(z: f64, beta: ShapeExponent) -> f64 {
    match beta.integer_half() {
        Some(n) => 2.0 * n as f64 * z * (z * z).powi(n - 1),
        None => {
            if z == 0.0 {
                0.0
            } else {
                beta.beta() * z.abs().powf(beta.beta() - 1.0) * z.signum()
            }
        }
    }
}

/// `(∂g/∂x_t, ∂g/∂σ_inv)` of [`temporal_opacity`].
pub fn temporal_opacity_grad(t: f64, x_t: f64, inv_scale: f64, beta: ShapeExponent) -> (f64, f64) {
    let delta = t - x_t;
    let z = delta * inv_scale;
    let g = (-power(z, beta)).exp();
    let dg_dz = -g * power_derivative(z, beta);
    (-dg_dz * inv_scale, dg_dz * delta)
}

/// Temporal opacity under a selectable model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TemporalOpacity {
    pub model: OpacityModel,
    pub exponent: ShapeExponent,
}

impl TemporalOpacity {
    pub fn eval(&self, t: f64, x_t: f64, inv_scale: f64) -> f64 {
        match self.model {
            OpacityModel::Generalized => temporal_opacity(t, x_t, inv_scale, self.exponent),
            OpacityModel::Gaussian4dgs => {
                let z = (t - x_t) * inv_scale;
                (-0.5 * z * z).exp()
            }
        }
    }

    pub fn grad(&self, t: f64, x_t: f64, inv_scale: f64) -> (f64, f64) {
        match self.model {
            OpacityModel::Generalized => temporal_opacity_grad(t, x_t, inv_scale, self.exponent),
            OpacityModel::Gaussian4dgs => {
                let delta = t - x_t;
                let z = delta * inv_scale;
                let g = (-0.5 * z * z).exp();
                let dg_dz = -g * z;
                (-dg_dz * inv_scale, dg_dz * delta)
            }
        }
    }
}

/// Motion offset with `coeffs` holding `degree` 3-vectors.
pub fn motion_eval(delta: f64, coeffs: &[f64]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    let mut p = 1.0;
    for a in coeffs.chunks_exact(3) {
        p *= delta;
        out += p * Vector3::new(a[0], a[1], a[2]);
    }
    out
}

/// `d(motion)/dΔ`.
pub fn motion_rate(delta: f64, coeffs: &[f64]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    let mut p = 1.0;
    for (j, a) in coeffs.chunks_exact(3).enumerate() {
        out += (j + 1) as f64 * p * Vector3::new(a[0], a[1], a[2]);
        p *= delta;
    }
    out
}

/// A 3D Gaussian sliced out of a 4D Gaussian, along with its temporal
/// activation `α′`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub gaussian: Gaussian3D,
    pub activation: f64,
}

/// Center `x_xyz + h(t_r)` and opacity `ρ·g(t_r)`; everything else copied.
pub fn slice_to_3d(g: &NeuralGaussian4D, t_r: f64, opacity: &TemporalOpacity) -> Slice {
    let delta = t_r - g.position[3];
    let center = Vector3::new(g.position[0], g.position[1], g.position[2])
        + motion_eval(delta, g.motion_coeffs());
    let activation = opacity.eval(t_r, g.position[3], g.inv_temporal_scale);
    Slice {
        gaussian: Gaussian3D {
            center,
            rotation: g.rotation,
            scale: g.scale,
            opacity: g.opacity * activation,
            color: g.color,
        },
        activation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn beta(b: f64) -> ShapeExponent {
        ShapeExponent::from_beta(b).unwrap()
    }

    #[test]
    fn motion_examples() {
        assert_eq!(motion_offset(0.3, 0.3, &Vector3::new(5.0, 1.0, 2.0)), Vector3::zeros());
        assert_eq!(
            motion_offset(0.75, 0.25, &Vector3::new(2.0, 0.0, -4.0)),
            Vector3::new(1.0, 0.0, -2.0)
        );
        for t in [0.0, 0.4, 1.0] {
            assert_eq!(motion_offset(t, 0.5, &Vector3::zeros()), Vector3::zeros());
        }
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(temporal_opacity(0.4, 0.4, 7.0, beta(2.0)), 1.0);
        for b in [0.5, 1.0, 2.0, 3.0, 4.0, 8.0] {
            assert_relative_eq!(temporal_opacity(0.6, 0.2, 2.5, beta(b)), (-1.0f64).exp(), epsilon = 1e-12);
        }
        assert_relative_eq!(temporal_opacity(2.0, 0.0, 1.0, beta(2.0)), 0.018315638888734, epsilon = 1e-12);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(temporal_opacity_grad(0.5, 0.5, 3.0, beta(2.0)), (0.0, 0.0));
        let (_, ds) = temporal_opacity_grad(1.0, 0.0, 1.0, beta(2.0));
        assert_relative_eq!(ds, -2.0 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(ShapeExponent::from_beta(0.0).is_err());
        assert!(ShapeExponent::from_beta(f64::NAN).is_err());
        assert_eq!(ShapeExponent::from_beta(12.0).unwrap().beta(), 12.0);
    }

    fn central<F: Fn(f64) -> f64>(f: F, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            t in 0.0f64..1.0, xt in 0.0f64..1.0, s in 0.5f64..6.0,
            b in prop::sample::select(vec![1.5, 2.0, 3.0, 4.0, 6.0, 8.0]),
        ) {
            let beta = beta(b);
            // Away from the flat peak and the numerically flat tail, where the
            // difference quotient's own truncation error exceeds the tolerance.
            prop_assume!(temporal_opacity(t, xt, s, beta) >= 1e-3);
            prop_assume!((t - xt).abs() * s >= 0.05);
            let (gx, gs) = temporal_opacity_grad(t, xt, s, beta);
            let fx = central(|x| temporal_opacity(t, x, s, beta), xt, 1e-5);
            let fs = central(|v| temporal_opacity(t, xt, v, beta), s, 1e-5);
            prop_assert!((gx - fx).abs() <= 1e-6 * gx.abs().max(fx.abs()).max(1e-4));
            prop_assert!((gs - fs).abs() <= 1e-6 * gs.abs().max(fs.abs()).max(1e-4));
        }

        #[test]
        fn gaussian4dgs_gradient_matches(t in 0.0f64..1.0, xt in 0.0f64..1.0, s in 0.5f64..6.0) {
            let op = TemporalOpacity { model: OpacityModel::Gaussian4dgs, exponent: Default::default() };
            let (gx, gs) = op.grad(t, xt, s);
            let fx = central(|x| op.eval(t, x, s), xt, 1e-5);
            let fs = central(|v| op.eval(t, xt, v), s, 1e-5);
            prop_assert!((gx - fx).abs() <= 1e-6 * gx.abs().max(fx.abs()).max(1e-4));
            prop_assert!((gs - fs).abs() <= 1e-6 * gs.abs().max(fs.abs()).max(1e-4));
        }

        #[test]
        fn symmetric_in_delta(xt in 0.0f64..1.0, d in 0.0f64..1.0, s in 0.1f64..10.0, b in 0.5f64..8.0) {
            let beta = beta(b);
            let (a, b) = (temporal_opacity(xt + d, xt, s, beta), temporal_opacity(xt - d, xt, s, beta));
            prop_assert!((a - b).abs() <= 1e-12);
            // Exact when the offsets are exactly representable.
            prop_assert_eq!(temporal_opacity(d, 0.0, s, beta), temporal_opacity(-d, 0.0, s, beta));
        }

        #[test]
        fn crossover_in_beta(d in 0.0f64..2.0, s in 0.5f64..4.0) {
            let z = d * s;
            prop_assume!((z - 1.0).abs() > 1e-3);
            let lo = temporal_opacity(d, 0.0, s, beta(2.0));
            let hi = temporal_opacity(d, 0.0, s, beta(6.0));
            if z < 1.0 { prop_assert!(hi >= lo); } else { prop_assert!(hi <= lo); }
        }

        #[test]
        fn decreasing_in_distance(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, s in 0.5f64..4.0) {
            let (a, b) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(temporal_opacity(a, 0.0, s, beta(2.0)) >= temporal_opacity(b, 0.0, s, beta(2.0)));
        }

        #[test]
        fn polynomial_rate_matches(delta in -1.0f64..1.0, c in prop::array::uniform9(-2.0f64..2.0)) {
            let r = motion_rate(delta, &c);
            let eps = 1e-6;
            let fd = (motion_eval(delta + eps, &c) - motion_eval(delta - eps, &c)) / (2.0 * eps);
            prop_assert!((r - fd).norm() < 1e-7);
        }
    }
}
