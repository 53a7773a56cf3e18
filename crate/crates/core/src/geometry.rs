//! Gaussian parameterization, covariance construction and camera projection.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{invalid, Result};
use crate::sh;

/// Low-pass dilation added to every projected covariance, in px².
pub const LOW_PASS_DILATION: f64 = 0.3;

/// One anisotropic 3D Gaussian primitive.
///
/// Rotation is a quaternion stored as `(w, x, y, z)`; it is renormalized
/// whenever it is turned into a matrix. `sh_coeffs[b]` holds the RGB
/// coefficients of basis function `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<[f64; 3]>,
}

impl Gaussian {
    /// Isotropic Gaussian with the given standard deviation, opacity and
    /// base color, with SH bands up to `degree`.
    pub fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3], degree: usize) -> Self {
        let mut sh_coeffs = vec![[0.0; 3]; sh::num_basis(degree)];
        sh_coeffs[0] = sh::rgb_to_dc(rgb);
        Self {
            center,
            log_scale: Vector3::repeat(sigma.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            sh_coeffs,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Result<Matrix3<f64>> {
        quat_to_rotation(self.rotation)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera frame convention: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub rotation_w2c: Matrix3<f64>,
    pub translation_w2c: Vector3<f64>,
    pub near_clip: f64,
}

impl Camera {
    pub fn new(
        focal: [f64; 2],
        principal: [f64; 2],
        resolution: [usize; 2],
        rotation_w2c: Matrix3<f64>,
        translation_w2c: Vector3<f64>,
        near_clip: f64,
    ) -> Result<Self> {
        let cam = Self {
            focal,
            principal,
            width: resolution[0],
            height: resolution[1],
            rotation_w2c,
            translation_w2c,
            near_clip,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| invalid("eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| invalid("up vector parallel to view direction"))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye);
        Self::new(
            [focal, focal],
            [width as f64 / 2.0, height as f64 / 2.0],
            [width, height],
            rot,
            trans,
            0.01,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("camera resolution must be positive"));
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if !(self.near_clip > 0.0) {
            return Err(invalid("near clip must be positive"));
        }
        let err = (self.rotation_w2c * self.rotation_w2c.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(invalid(format!("camera rotation is not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation_w2c.transpose() * self.translation_w2c)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_w2c * p + self.translation_w2c
    }
}

/// A Gaussian projected onto the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub view_dir: Vector3<f64>,
}

impl Splat2D {
    /// Inverse of `cov2d`.
    pub fn conic(&self) -> Matrix2<f64> {
        inverse_sym2(&self.cov2d)
    }

    /// Larger eigenvalue of `cov2d`.
    pub fn max_eigenvalue(&self) -> f64 {
        let a = self.cov2d[(0, 0)];
        let b = self.cov2d[(0, 1)];
        let c = self.cov2d[(1, 1)];
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        mid + disc
    }
}

pub(crate) fn inverse_sym2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let inv = 1.0 / det;
    Matrix2::new(m[(1, 1)] * inv, -m[(0, 1)] * inv, -m[(1, 0)] * inv, m[(0, 0)] * inv)
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(invalid("quaternion must have positive finite norm"));
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    Ok(unit_quat_to_rotation(w, x, y, z))
}

#[inline]
pub(crate) fn unit_quat_to_rotation(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
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

/// Σ = R·diag(s)²·Rᵀ with s = exp(log_scale).
pub fn covariance_3d(g: &Gaussian) -> Result<Matrix3<f64>> {
    let r = g.rotation_matrix()?;
    let m = r * Matrix3::from_diagonal(&g.scale());
    Ok(m * m.transpose())
}

/// Unnormalized Gaussian density exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ)).
pub fn eval_gaussian(g: &Gaussian, x: &Vector3<f64>) -> Result<f64> {
    let r = g.rotation_matrix()?;
    // Σ⁻¹ = R·diag(1/s²)·Rᵀ, so the Mahalanobis term is |diag(1/s)·Rᵀ(x−μ)|².
    let local = r.transpose() * (x - g.center);
    let s = g.scale();
    let m = (0..3).map(|k| (local[k] / s[k]).powi(2)).sum::<f64>();
    Ok((-0.5 * m).exp())
}

/// Intermediate quantities of a projection, reused by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub splat: Splat2D,
    pub t_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub unit_quat: [f64; 4],
    pub quat_norm: f64,
    pub sigma3d: Matrix3<f64>,
    pub view_offset: Vector3<f64>,
}

pub(crate) fn project_detailed(g: &Gaussian, cam: &Camera) -> Result<Option<Projection>> {
    let t_cam = cam.to_camera(&g.center);
    if t_cam.z <= cam.near_clip {
        return Ok(None);
    }
    let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(invalid("quaternion must have positive finite norm"));
    }
    let uq = g.rotation.map(|v| v / norm);
    let rotation = unit_quat_to_rotation(uq[0], uq[1], uq[2], uq[3]);
    let scale = g.scale();
    let m = rotation * Matrix3::from_diagonal(&scale);
    let sigma3d = m * m.transpose();

    let [fx, fy] = cam.focal;
    let (tx, ty, tz) = (t_cam.x, t_cam.y, t_cam.z);
    let inv_z = 1.0 / tz;
    let inv_z2 = inv_z * inv_z;
    let jacobian = Matrix2x3::new(fx * inv_z, 0.0, -fx * tx * inv_z2, 0.0, fy * inv_z, -fy * ty * inv_z2);
    let t = jacobian * cam.rotation_w2c;
    let mut cov2d = t * sigma3d * t.transpose();
    // exact symmetry
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += LOW_PASS_DILATION;
    cov2d[(1, 1)] += LOW_PASS_DILATION;

    let mean2d = Vector2::new(fx * tx * inv_z + cam.principal[0], fy * ty * inv_z + cam.principal[1]);
    let view_offset = g.center - cam.position();
    let view_dir = view_offset.normalize();
    Ok(Some(Projection {
        splat: Splat2D {
            mean2d,
            cov2d,
            depth: tz,
            view_dir,
        },
        t_cam,
        jacobian,
        rotation,
        scale,
        unit_quat: uq,
        quat_norm: norm,
        sigma3d,
        view_offset,
    }))
}

/// Projects a Gaussian to a screen-space splat; `None` when culled by the
/// near plane.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Result<Option<Splat2D>> {
    Ok(project_detailed(g, cam)?.map(|p| p.splat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
        Gaussian {
            center: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            log_scale: Vector3::new(rng.random_range(-1.0..0.5), rng.random_range(-1.0..0.5), rng.random_range(-1.0..0.5)),
            rotation: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            opacity_logit: 0.0,
            sh_coeffs: vec![[0.0; 3]],
        }
    }

    fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        // Rodrigues formula
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r2 = quat_to_rotation([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r2, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let r = quat_to_rotation([h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        let oracle = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        for basis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            assert_abs_diff_eq!(r * basis, oracle * basis, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn random_quaternions_match_axis_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let angle: f64 = rng.random_range(-3.0..3.0);
            let k = axis.normalize();
            let q = [(angle / 2.0).cos(), k.x * (angle / 2.0).sin(), k.y * (angle / 2.0).sin(), k.z * (angle / 2.0).sin()];
            let r = quat_to_rotation(q).unwrap();
            assert_abs_diff_eq!(r, axis_angle(axis, angle), epsilon = 1e-12);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(quat_to_rotation([0.0; 4]).is_err());
    }

    #[test]
    fn covariance_examples() {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3], 0);
        assert_abs_diff_eq!(covariance_3d(&g).unwrap(), Matrix3::identity(), epsilon = 1e-15);
        g.log_scale.x = 2f64.ln();
        assert_abs_diff_eq!(
            covariance_3d(&g).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_gaussian(&mut rng);
        let r = quat_to_rotation(g.rotation).unwrap();
        let s = g.scale();
        let n = 1_000_000;
        let mut acc = Matrix3::<f64>::zeros();
        for _ in 0..n {
            let z = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let x = r * z.component_mul(&s);
            acc += x * x.transpose();
        }
        acc /= n as f64;
        let sigma = covariance_3d(&g).unwrap();
        let scale = sigma.abs().max();
        for (a, b) in acc.iter().zip(sigma.iter()) {
            assert!((a - b).abs() < 0.01 * scale, "{acc} vs {sigma}");
        }
        assert!(sigma.cholesky().is_some());
    }

    fn cofactor_inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
        let cof = Matrix3::new(
            c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1),
            -c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1),
            c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1),
        );
        let det = m[(0, 0)] * cof[(0, 0)] + m[(0, 1)] * cof[(0, 1)] + m[(0, 2)] * cof[(0, 2)];
        cof.transpose() / det
    }

    #[test]
    fn eval_gaussian_cases() {
        let g = Gaussian::isotropic(Vector3::new(1.0, 2.0, 3.0), 1.0, 0.5, [0.5; 3], 0);
        assert_eq!(eval_gaussian(&g, &g.center).unwrap(), 1.0);
        let x = g.center + Vector3::new(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(eval_gaussian(&g, &x).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(eval_gaussian(&g, &x).unwrap(), 0.60653, epsilon = 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let inv = cofactor_inverse(&covariance_3d(&g).unwrap());
            let d = x - g.center;
            let oracle = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
            assert_abs_diff_eq!(eval_gaussian(&g, &x).unwrap(), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn eval_gaussian_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let k = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let a: f64 = rng.random_range(-3.0..3.0);
            let qr = [(a / 2.0).cos(), k.x * (a / 2.0).sin(), k.y * (a / 2.0).sin(), k.z * (a / 2.0).sin()];
            let rot = quat_to_rotation(qr).unwrap();
            // compose quaternions: qr * q
            let q = g.rotation;
            let composed = [
                qr[0] * q[0] - qr[1] * q[1] - qr[2] * q[2] - qr[3] * q[3],
                qr[0] * q[1] + qr[1] * q[0] + qr[2] * q[3] - qr[3] * q[2],
                qr[0] * q[2] - qr[1] * q[3] + qr[2] * q[0] + qr[3] * q[1],
                qr[0] * q[3] + qr[1] * q[2] - qr[2] * q[1] + qr[3] * q[0],
            ];
            let mut moved = g.clone();
            moved.center = rot * g.center;
            moved.rotation = composed;
            let a0 = eval_gaussian(&g, &x).unwrap();
            let a1 = eval_gaussian(&moved, &(rot * x)).unwrap();
            assert_abs_diff_eq!(a0, a1, epsilon = 1e-12);
        }
    }

    fn test_camera() -> Camera {
        Camera::new([50.0, 50.0], [16.0, 16.0], [32, 32], Matrix3::identity(), Vector3::zeros(), 0.01).unwrap()
    }

    #[test]
    fn culls_behind_camera() {
        let cam = test_camera();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.1, 0.5, [0.5; 3], 0);
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.005), 0.1, 0.5, [0.5; 3], 0);
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
    }

    #[test]
    fn on_axis_projection() {
        let cam = test_camera();
        let (sigma, depth, f) = (0.05, 3.0, 50.0);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, depth), sigma, 0.5, [0.5; 3], 0);
        let s = project_gaussian(&g, &cam).unwrap().unwrap();
        assert_eq!(s.mean2d, Vector2::new(16.0, 16.0));
        assert_eq!(s.depth, depth);

        // finite-difference Jacobian of the pinhole map
        let proj = |p: Vector3<f64>| Vector2::new(f * p.x / p.z + 16.0, f * p.y / p.z + 16.0);
        let h = 1e-6;
        let mut jac = Matrix2x3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let c = g.center;
            let col = (proj(c + e) - proj(c - e)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let expected = jac * covariance_3d(&g).unwrap() * jac.transpose() + Matrix2::identity() * LOW_PASS_DILATION;
        let closed = (f * sigma / depth).powi(2) + LOW_PASS_DILATION;
        for (a, b) in s.cov2d.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-6 * closed, "{} vs {}", s.cov2d, expected);
        }
        assert!((s.cov2d[(0, 0)] - closed).abs() <= 1e-6 * closed);
    }

    #[test]
    fn camera_roll_rotates_splat() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = Camera::look_at(Vector3::new(0.3, -0.2, -4.0), Vector3::zeros(), -Vector3::y(), 40.0, 32, 32).unwrap();
        // 90° roll about the optical axis: camera x' = y, y' = -x
        let roll = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let mut rolled = base.clone();
        rolled.rotation_w2c = roll * base.rotation_w2c;
        rolled.translation_w2c = roll * base.translation_w2c;
        let rot2 = Matrix2::new(0.0, 1.0, -1.0, 0.0);
        for _ in 0..20 {
            let g = random_gaussian(&mut rng);
            let a = project_gaussian(&g, &base).unwrap().unwrap();
            let b = project_gaussian(&g, &rolled).unwrap().unwrap();
            let pp = Vector2::new(16.0, 16.0);
            assert_abs_diff_eq!(b.mean2d - pp, rot2 * (a.mean2d - pp), epsilon = 1e-9);
            assert_abs_diff_eq!(b.cov2d, rot2 * a.cov2d * rot2.transpose(), epsilon = 1e-9);
            assert!(b.cov2d.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn camera_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new([1.0, 1.0], [0.0, 0.0], [4, 4], bad, Vector3::zeros(), 0.1).is_err());
        assert!(Camera::new([0.0, 1.0], [0.0, 0.0], [4, 4], Matrix3::identity(), Vector3::zeros(), 0.1).is_err());
        let cam = Camera::look_at(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Vector3::y(), 10.0, 8, 8).unwrap();
        assert_abs_diff_eq!(cam.position(), Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
        assert!(cam.to_camera(&Vector3::zeros()).z > 0.0);
    }
}
