//! Gaussian primitives, pinhole cameras and the perspective projection of a
//! 3D covariance onto the image plane.

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

pub const IDENTITY_QUAT: Quat = Vector4::new(1.0, 0.0, 0.0, 0.0);

/// One splat in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub quat: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    /// Normalizes the quaternion and clamps opacity and color into `[0, 1]`.
    pub fn new(mu: Vector3<f64>, quat: Quat, scale: Vector3<f64>, opacity: f64, color: Vector3<f64>) -> Result<Self> {
        let n = quat.norm();
        if n < 1e-8 {
            return Err(Error::invalid("quaternion norm below 1e-8"));
        }
        if scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
        }
        Ok(Self {
            mu,
            quat: quat / n,
            scale,
            opacity: opacity.clamp(0.0, 1.0),
            color: color.map(|c| c.clamp(0.0, 1.0)),
        })
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_scale_rotation(&self.scale, &self.quat)
    }
}

/// Pinhole camera. `cam_to_world` maps camera coordinates (x right, y down,
/// z forward) to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        cam_to_world: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            cam_to_world,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("extrinsic rotation is not a proper rotation"));
        }
        let last = self.cam_to_world.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::invalid("extrinsics last row must be (0, 0, 0, 1)"));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking at `target`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let f = (target - eye).normalize();
        let r = f.cross(&up);
        if r.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let r = r.normalize();
        let d = f.cross(&r);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&d);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&f);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            m,
            width,
            height,
        )
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-to-world rotation block.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-to-camera rotation and translation.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rt = self.rotation().transpose();
        let t = -(rt * self.center());
        (rt, t)
    }

    pub fn world_to_camera_matrix(&self) -> Matrix3x4<f64> {
        let (r, t) = self.world_to_camera();
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// Applies a rigid world transform to the camera pose.
    pub fn transformed(&self, rigid: &Matrix4<f64>) -> Self {
        Self {
            cam_to_world: rigid * self.cam_to_world,
            ..self.clone()
        }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion.
pub fn quaternion_to_rotation(q: &Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if n < 1e-8 {
        return Err(Error::invalid("quaternion norm below 1e-8"));
    }
    Ok(rotation_of_unit(&(q / n)))
}

fn rotation_of_unit(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

/// Unit quaternion of a proper rotation matrix.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> Quat {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance_from_scale_rotation(scale: &Vector3<f64>, q: &Quat) -> Result<Matrix3<f64>> {
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("non-positive scale {scale:?}")));
    }
    let r = quaternion_to_rotation(q)?;
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSettings {
    /// Gaussians with camera-frame z at or below this are culled (meters).
    pub near: f64,
    /// Added to both diagonal entries of the image-plane covariance (pixels²).
    pub cov_reg: f64,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            near: 0.01,
            cov_reg: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Euclidean distance from the camera center.
    pub cam_distance: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl ProjectedGaussian {
    /// Inverse of `cov2d`, symmetric by construction.
    pub fn conic(&self) -> Matrix2<f64> {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let det = a * c - b * b;
        Matrix2::new(c / det, -b / det, -b / det, a / det)
    }
}

/// Intermediate values of one projection, reused by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ProjectionCache {
    pub p_cam: Vector3<f64>,
    pub rot: Matrix3<f64>,
    pub quat_unit: Quat,
    pub quat_norm: f64,
    pub m: Matrix3<f64>,
    pub sigma: Matrix3<f64>,
    pub t: nalgebra::Matrix2x3<f64>,
}

pub fn project_gaussian(
    g: &GaussianPrimitive,
    cam: &Camera,
    settings: &ProjectionSettings,
) -> Option<ProjectedGaussian> {
    project_with_cache(g, cam, settings).map(|(p, _)| p)
}

pub(crate) fn project_with_cache(
    g: &GaussianPrimitive,
    cam: &Camera,
    settings: &ProjectionSettings,
) -> Option<(ProjectedGaussian, ProjectionCache)> {
    let (rw, tw) = cam.world_to_camera();
    let p = rw * g.mu + tw;
    let (x, y, z) = (p[0], p[1], p[2]);
    if z <= settings.near {
        return None;
    }
    let qn = g.quat.norm();
    let (quat_unit, quat_norm) = if qn < 1e-8 {
        (IDENTITY_QUAT, 0.0)
    } else {
        (g.quat / qn, qn)
    };
    let rot = rotation_of_unit(&quat_unit);
    let m = rot * Matrix3::from_diagonal(&g.scale);
    let sigma = m * m.transpose();
    let j = nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let t = j * rw;
    let mut cov = t * sigma * t.transpose();
    // exact symmetry
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += settings.cov_reg;
    cov[(1, 1)] += settings.cov_reg;
    let pg = ProjectedGaussian {
        mean2d: Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov2d: cov,
        cam_distance: p.norm(),
        opacity: g.opacity,
        color: g.color,
    };
    Some((
        pg,
        ProjectionCache {
            p_cam: p,
            rot,
            quat_unit,
            quat_norm,
            m,
            sigma,
            t,
        },
    ))
}

/// Upstream gradients w.r.t. the projected quantities.
#[derive(Debug, Clone, Default)]
pub struct ProjectedGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub cam_distance: f64,
}

/// Gradients w.r.t. the world-space parameters that feed the projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeometryGrad {
    pub mu: Vector3<f64>,
    pub quat: Quat,
    pub scale: Vector3<f64>,
}

pub(crate) fn project_backward(
    g: &GaussianPrimitive,
    cam: &Camera,
    cache: &ProjectionCache,
    up: &ProjectedGrad,
) -> GeometryGrad {
    let (rw, _) = cam.world_to_camera();
    let p = cache.p_cam;
    let (x, y, z) = (p[0], p[1], p[2]);
    let (fx, fy) = (cam.fx, cam.fy);

    // cov2d = T Σ Tᵀ
    let gc = up.cov2d;
    let gsym = gc + gc.transpose();
    let d_t = gsym * cache.t * cache.sigma;
    let d_sigma = cache.t.transpose() * gc * cache.t;
    let d_j = d_t * rw.transpose();

    let z2 = z * z;
    let z3 = z2 * z;
    let mut dp = Vector3::zeros();
    dp[0] += d_j[(0, 2)] * (-fx / z2);
    dp[1] += d_j[(1, 2)] * (-fy / z2);
    dp[2] += d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 2)] * (2.0 * fx * x / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);

    let gm = up.mean2d;
    dp[0] += gm[0] * fx / z;
    dp[1] += gm[1] * fy / z;
    dp[2] += -gm[0] * fx * x / z2 - gm[1] * fy * y / z2;

    let d = p.norm();
    if d > 0.0 {
        dp += p * (up.cam_distance / d);
    }
    let d_mu = rw.transpose() * dp;

    // Σ = M Mᵀ, M = R S
    let d_m = (d_sigma + d_sigma.transpose()) * cache.m;
    let mut d_r = Matrix3::zeros();
    let mut d_scale = Vector3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * g.scale[j];
            d_scale[j] += d_m[(i, j)] * cache.rot[(i, j)];
        }
    }
    let d_quat = if cache.quat_norm == 0.0 {
        Quat::zeros()
    } else {
        quat_backward(&cache.quat_unit, cache.quat_norm, &d_r)
    };
    GeometryGrad {
        mu: d_mu,
        quat: d_quat,
        scale: d_scale,
    }
}

/// Vector-Jacobian product of [`project_gaussian`]: maps gradients on the
/// projected quantities back to `μ`, the raw quaternion and the scale.
/// Returns `None` for culled Gaussians.
pub fn project_gaussian_vjp(
    g: &GaussianPrimitive,
    cam: &Camera,
    settings: &ProjectionSettings,
    up: &ProjectedGrad,
) -> Option<GeometryGrad> {
    let (_, cache) = project_with_cache(g, cam, settings)?;
    Some(project_backward(g, cam, &cache, up))
}

/// Gradient w.r.t. the raw quaternion given the gradient w.r.t. `R(q/|q|)`.
fn quat_backward(q: &Quat, norm: f64, dr: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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
    let g_unit = Vector4::new(
        dr.component_mul(&dw).sum(),
        dr.component_mul(&dx).sum(),
        dr.component_mul(&dy).sum(),
        dr.component_mul(&dz).sum(),
    );
    (g_unit - q * q.dot(&g_unit)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(fx: f64, c: f64) -> Camera {
        Camera::new(fx, fx, c, c, Matrix4::identity(), 100, 100).unwrap()
    }

    #[test]
    fn quaternion_cases() {
        assert_relative_eq!(quaternion_to_rotation(&IDENTITY_QUAT).unwrap(), Matrix3::identity());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = quaternion_to_rotation(&Vector4::new(s, 0.0, 0.0, s)).unwrap();
        assert_relative_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
        assert_relative_eq!(
            quaternion_to_rotation(&Vector4::new(2.0, 0.0, 0.0, 0.0)).unwrap(),
            Matrix3::identity()
        );
        assert!(quaternion_to_rotation(&Vector4::new(1e-9, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn covariance_cases() {
        let id = covariance_from_scale_rotation(&Vector3::new(1.0, 1.0, 1.0), &IDENTITY_QUAT).unwrap();
        assert_relative_eq!(id, Matrix3::identity());
        let d = covariance_from_scale_rotation(&Vector3::new(2.0, 1.0, 1.0), &IDENTITY_QUAT).unwrap();
        assert_relative_eq!(d, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = covariance_from_scale_rotation(&Vector3::new(2.0, 1.0, 1.0), &Vector4::new(s, 0.0, 0.0, s)).unwrap();
        assert_relative_eq!(r, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
        assert!(covariance_from_scale_rotation(&Vector3::new(0.0, 1.0, 1.0), &IDENTITY_QUAT).is_err());
    }

    #[test]
    fn projection_on_axis() {
        let g = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 2.0),
            IDENTITY_QUAT,
            Vector3::new(1.0, 1.0, 1.0),
            0.5,
            Vector3::zeros(),
        )
        .unwrap();
        let p = project_gaussian(&g, &axis_camera(100.0, 50.0), &ProjectionSettings::default()).unwrap();
        assert_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_relative_eq!(p.cov2d, Matrix2::new(2500.3, 0.0, 0.0, 2500.3), epsilon = 1e-9);
        assert_eq!(p.cam_distance, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, -1.0),
            IDENTITY_QUAT,
            Vector3::new(1.0, 1.0, 1.0),
            0.5,
            Vector3::zeros(),
        )
        .unwrap();
        assert!(project_gaussian(&g, &axis_camera(100.0, 50.0), &ProjectionSettings::default()).is_none());
    }

    #[test]
    fn cov2d_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = Camera::look_at(
            Vector3::new(4.0, 1.0, 1.0),
            Vector3::zeros(),
            Vector3::z(),
            60.0,
            64,
            64,
        )
        .unwrap();
        for _ in 0..100 {
            let g = GaussianPrimitive::new(
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                Vector4::new(rng.random(), rng.random(), rng.random(), rng.random()),
                Vector3::new(
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                ),
                0.5,
                Vector3::zeros(),
            )
            .unwrap();
            let p = project_gaussian(&g, &cam, &ProjectionSettings::default()).unwrap();
            assert_eq!(p.cov2d[(0, 1)].to_bits(), p.cov2d[(1, 0)].to_bits());
        }
    }

    #[test]
    fn look_at_is_proper() {
        let cam = Camera::look_at(
            Vector3::new(5.0, 0.0, 2.0),
            Vector3::zeros(),
            Vector3::z(),
            64.0,
            64,
            64,
        )
        .unwrap();
        let (rw, tw) = cam.world_to_camera();
        let pc = rw * Vector3::zeros() + tw;
        assert!(pc[0].abs() < 1e-12 && pc[1].abs() < 1e-12 && pc[2] > 0.0);
    }
}
