//! Covariance assembly, the pinhole camera and EWA projection of 3D Gaussians.
//!
//! Quaternions are `(w, x, y, z)` and are normalized on use. Camera space
//! follows the OpenCV convention: x right, y down, z forward.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default 2D low-pass dilation added to every projected covariance, in px².
pub const DEFAULT_LOWPASS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with a vertical field of view in
    /// radians and the principal point at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let right = right.normalize();
        // y points down in camera space.
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Camera::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = self.rotation * self.rotation.transpose();
        if (rrt - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!(
                "camera planes must satisfy 0 < near < far (near {}, far {})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be at least 1x1"));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera intrinsics must be finite and positive"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let pc = self.to_camera(p);
        if pc.z <= self.near || pc.z >= self.far {
            return None;
        }
        Some(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub center: Vector3<f64>,
    /// `(w, x, y, z)`, not necessarily normalized.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Symmetric 2×2 matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> Sym2 {
        let det = self.det();
        Sym2 {
            a: self.c / det,
            b: -self.b / det,
            c: self.a / det,
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let mid = 0.5 * (self.a + self.c);
        let half = (0.25 * (self.a - self.c).powi(2) + self.b * self.b).sqrt();
        mid + half
    }

    /// `dᵀ M d`.
    pub fn quad(&self, d: &Vector2<f64>) -> f64 {
        self.a * d.x * d.x + 2.0 * self.b * d.x * d.y + self.c * d.y * d.y
    }

    fn as_matrix(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::new(self.a, self.b, self.b, self.c)
    }

    /// Gradient w.r.t. `(a, b, c)` expressed as a symmetric matrix whose
    /// off-diagonal carries half of the `b` gradient.
    fn grad_as_matrix(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::new(self.a, 0.5 * self.b, 0.5 * self.b, self.c)
    }

    fn grad_from_matrix(m: &nalgebra::Matrix2<f64>) -> Sym2 {
        Sym2 {
            a: m[(0, 0)],
            b: m[(0, 1)] + m[(1, 0)],
            c: m[(1, 1)],
        }
    }
}

fn check_finite(vals: &[f64], what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_from_unit_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `dL/dq̂` from `dL/dR` for a unit quaternion `q̂`.
fn unit_quat_grad(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [
        g.component_mul(&dw).sum(),
        g.component_mul(&dx).sum(),
        g.component_mul(&dy).sum(),
        g.component_mul(&dz).sum(),
    ]
}

/// `Σ = R(q)·diag(s²)·R(q)ᵀ`, exactly symmetric.
pub fn covariance_from_qs(q: &[f64; 4], s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_finite(q, "quaternion")?;
    check_finite(s.as_slice(), "scale")?;
    let n2 = q.iter().map(|v| v * v).sum::<f64>();
    if n2 <= 0.0 {
        return Err(Error::invalid("zero quaternion"));
    }
    if s.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("scale components must be positive"));
    }
    Ok(covariance_unchecked(q, s))
}

pub(crate) fn covariance_unchecked(q: &[f64; 4], s: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation_from_unit_quat(&normalize_quat(q));
    let m = r * Matrix3::from_diagonal(s);
    let mut sigma = m * m.transpose();
    for i in 0..3 {
        for j in (i + 1)..3 {
            sigma[(j, i)] = sigma[(i, j)];
        }
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Sym2,
    pub depth: f64,
}

fn projection_jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz * iz,
    )
}

/// EWA projection. Returns `None` (culled) when the center is outside the
/// `(near, far)` depth range.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera, lowpass: f64) -> Option<Projected> {
    let sigma = covariance_unchecked(&g.rotation, &g.scale);
    project_with_cov(&g.center, &sigma, cam, lowpass)
}

pub(crate) fn project_with_cov(
    center: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    cam: &Camera,
    lowpass: f64,
) -> Option<Projected> {
    let pc = cam.to_camera(center);
    if pc.z <= cam.near || pc.z >= cam.far {
        return None;
    }
    let t = projection_jacobian(cam, &pc) * cam.rotation;
    let c = t * sigma * t.transpose();
    Some(Projected {
        mean2d: Vector2::new(
            cam.fx * pc.x / pc.z + cam.cx,
            cam.fy * pc.y / pc.z + cam.cy,
        ),
        cov2d: Sym2 {
            a: c[(0, 0)] + lowpass,
            b: 0.5 * (c[(0, 1)] + c[(1, 0)]),
            c: c[(1, 1)] + lowpass,
        },
        depth: pc.z,
    })
}

/// Gradients of a projected Gaussian w.r.t. its 3D parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGrad {
    pub center: Vector3<f64>,
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
}

/// Reverse pass of [`project_gaussian`] given upstream gradients for the 2D
/// mean and the three entries of the 2D covariance.
pub fn project_backward(
    g: &Gaussian3D,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Sym2,
) -> ProjectionGrad {
    let qn = (g.rotation.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let qhat = normalize_quat(&g.rotation);
    let r = rotation_from_unit_quat(&qhat);
    let m = r * Matrix3::from_diagonal(&g.scale);
    let sigma = covariance_unchecked(&g.rotation, &g.scale);

    let pc = cam.to_camera(&g.center);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let j = projection_jacobian(cam, &pc);
    let w = cam.rotation;
    let t = j * w;

    // cov2d = T Σ Tᵀ + λI
    let gc = d_cov2d.grad_as_matrix();
    let g_sigma = t.transpose() * gc * t;
    let g_t = 2.0 * gc * t * sigma;
    let g_j = g_t * w.transpose();

    // Σ = M Mᵀ, M = R diag(s)
    let g_m = 2.0 * g_sigma * m;
    let mut g_r = Matrix3::zeros();
    let mut d_scale = Vector3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_r[(i, k)] = g_m[(i, k)] * g.scale[k];
            d_scale[k] += g_m[(i, k)] * r[(i, k)];
        }
    }
    let g_qhat = unit_quat_grad(&qhat, &g_r);
    let dot = (0..4).map(|i| g_qhat[i] * qhat[i]).sum::<f64>();
    let mut d_rot = [0.0; 4];
    for i in 0..4 {
        d_rot[i] = (g_qhat[i] - qhat[i] * dot) / qn;
    }

    // Camera-space position through the mean and the Jacobian.
    let mut g_pc = Vector3::new(
        d_mean2d.x * cam.fx * iz,
        d_mean2d.y * cam.fy * iz,
        -d_mean2d.x * cam.fx * x * iz2 - d_mean2d.y * cam.fy * y * iz2,
    );
    g_pc.x += g_j[(0, 2)] * (-cam.fx * iz2);
    g_pc.y += g_j[(1, 2)] * (-cam.fy * iz2);
    g_pc.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * x * iz2 * iz)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * y * iz2 * iz);

    ProjectionGrad {
        center: w.transpose() * g_pc,
        rotation: d_rot,
        scale: d_scale,
    }
}

/// Gradient of the conic `Q = cov⁻¹` pulled back onto `cov`.
pub fn conic_backward(conic: &Sym2, d_conic: &Sym2) -> Sym2 {
    let q = conic.as_matrix();
    let g = -(q * d_conic.grad_as_matrix() * q);
    Sym2::grad_from_matrix(&g)
}

/// Options for [`frustum_cull`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CullOptions {
    pub lowpass: f64,
    /// Bounding radius multiplier on `√λ_max(cov2d)`; `None` disables the
    /// image-bounds test.
    pub radius_sigma: Option<f64>,
}

impl Default for CullOptions {
    fn default() -> Self {
        CullOptions {
            lowpass: DEFAULT_LOWPASS,
            radius_sigma: Some(3.0),
        }
    }
}

/// Whether a disk of radius `r` around `p` touches the image rectangle.
pub fn disk_hits_image(p: &Vector2<f64>, r: f64, width: usize, height: usize) -> bool {
    let qx = p.x.clamp(0.0, width as f64);
    let qy = p.y.clamp(0.0, height as f64);
    let dx = p.x - qx;
    let dy = p.y - qy;
    dx * dx + dy * dy <= r * r
}

/// Indices of Gaussians inside the depth range, whose bounding disk touches
/// the image and whose opacity exceeds `opacity_threshold`.
pub fn frustum_cull(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    opacity_threshold: f64,
    opts: &CullOptions,
) -> Vec<usize> {
    gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| g.opacity > opacity_threshold)
        .filter_map(|(i, g)| {
            let p = project_gaussian(g, cam, opts.lowpass)?;
            match opts.radius_sigma {
                None => Some(i),
                Some(k) => {
                    let r = k * p.cov2d.max_eigenvalue().sqrt();
                    disk_hits_image(&p.mean2d, r, cam.width, cam.height).then_some(i)
                }
            }
        })
        .collect()
}
