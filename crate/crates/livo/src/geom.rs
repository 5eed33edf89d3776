//! Rotation and pose algebra, camera projection models, and unit-sphere
//! helpers shared by every other module.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GeomError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("pixel maps outside the calibrated fisheye cone")]
    OutsideValidCone,
    #[error("vector is not unit length")]
    NotUnit,
}

/// Rotation in SO(3), stored as a unit quaternion and exposed as a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self { q }
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            q: UnitQuaternion::from_matrix(m),
        }
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// `self * other`, renormalized.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let mut q = self.q * other.q;
        q.renormalize();
        Rotation { q }
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            q: self.q.inverse(),
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    /// Rotate by the inverse without forming it.
    pub fn unrotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.inverse_transform_vector(v)
    }

    /// Geodesic angle to another rotation, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.q.angle_to(&other.q)
    }
}

/// Exponential map of so(3): Rodrigues' rotation from an axis-angle vector.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    Rotation {
        q: UnitQuaternion::from_scaled_axis(*omega),
    }
}

/// Logarithm map of SO(3); inverse of [`so3_exp`] for angles below pi.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    r.q.scaled_axis()
}

/// Skew-symmetric matrix such that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3) at `omega`.
///
/// Relates additive perturbations of the axis-angle vector to multiplicative
/// perturbations of the rotation: Exp(w + dw) ~= Exp(w) Exp(Jr(w) dw).
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < 1e-7 {
        Matrix3::identity() - 0.5 * w + w * w / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() - w * ((1.0 - theta.cos()) / t2)
            + (w * w) * ((theta - theta.sin()) / (t2 * theta))
    }
}

/// Rigid transform: `p_out = rotation * p_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            translation: -rinv.rotate(&self.translation),
            rotation: rinv,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraKind {
    Pinhole,
    FisheyeEquidistant,
}

/// Calibrated camera model. Pinhole uses radial-tangential distortion
/// `[k1, k2, p1, p2]`; the fisheye model is the equidistant theta-polynomial
/// with coefficients `[k1, k2, k3, k4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

/// Largest incidence angle accepted by the fisheye inverse.
const FISHEYE_MAX_THETA: f64 = 1.9;

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            kind: CameraKind::Pinhole,
            fx,
            fy,
            cx,
            cy,
            distortion: Vec::new(),
            width,
            height,
        }
    }

    pub fn fisheye(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        coeffs: [f64; 4],
        width: u32,
        height: u32,
    ) -> Self {
        Self {
            kind: CameraKind::FisheyeEquidistant,
            fx,
            fy,
            cx,
            cy,
            distortion: coeffs.to_vec(),
            width,
            height,
        }
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    fn radtan(&self) -> (f64, f64, f64, f64) {
        let d = &self.distortion;
        (
            d.first().copied().unwrap_or(0.0),
            d.get(1).copied().unwrap_or(0.0),
            d.get(2).copied().unwrap_or(0.0),
            d.get(3).copied().unwrap_or(0.0),
        )
    }

    fn theta_poly(&self, theta: f64) -> f64 {
        let d = &self.distortion;
        let (k1, k2, k3, k4) = (
            d.first().copied().unwrap_or(0.0),
            d.get(1).copied().unwrap_or(0.0),
            d.get(2).copied().unwrap_or(0.0),
            d.get(3).copied().unwrap_or(0.0),
        );
        let t2 = theta * theta;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    fn theta_poly_deriv(&self, theta: f64) -> f64 {
        let d = &self.distortion;
        let (k1, k2, k3, k4) = (
            d.first().copied().unwrap_or(0.0),
            d.get(1).copied().unwrap_or(0.0),
            d.get(2).copied().unwrap_or(0.0),
            d.get(3).copied().unwrap_or(0.0),
        );
        let t2 = theta * theta;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    fn distort_radtan(&self, m: &Vector2<f64>) -> Vector2<f64> {
        let (k1, k2, p1, p2) = self.radtan();
        let r2 = m.norm_squared();
        let radial = 1.0 + r2 * (k1 + r2 * k2);
        Vector2::new(
            m.x * radial + 2.0 * p1 * m.x * m.y + p2 * (r2 + 2.0 * m.x * m.x),
            m.y * radial + p1 * (r2 + 2.0 * m.y * m.y) + 2.0 * p2 * m.x * m.y,
        )
    }

    /// 2x2 Jacobian of [`Self::distort_radtan`] w.r.t. the normalized point.
    fn distort_radtan_jacobian(&self, m: &Vector2<f64>) -> nalgebra::Matrix2<f64> {
        let (k1, k2, p1, p2) = self.radtan();
        let r2 = m.norm_squared();
        let radial = 1.0 + r2 * (k1 + r2 * k2);
        let dr = k1 + 2.0 * k2 * r2; // d(radial)/d(r2)
        nalgebra::Matrix2::new(
            radial + 2.0 * m.x * m.x * dr + 2.0 * p1 * m.y + 6.0 * p2 * m.x,
            2.0 * m.x * m.y * dr + 2.0 * p1 * m.x + 2.0 * p2 * m.y,
            2.0 * m.x * m.y * dr + 2.0 * p1 * m.x + 2.0 * p2 * m.y,
            radial + 2.0 * m.y * m.y * dr + 6.0 * p1 * m.y + 2.0 * p2 * m.x,
        )
    }
}

/// Project a camera-frame point to pixel coordinates.
pub fn project(camera: &CameraModel, p: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
    match camera.kind {
        CameraKind::Pinhole => {
            if p.z <= 0.0 {
                return Err(GeomError::BehindCamera);
            }
            let m = Vector2::new(p.x / p.z, p.y / p.z);
            let d = camera.distort_radtan(&m);
            Ok(Vector2::new(
                camera.fx * d.x + camera.cx,
                camera.fy * d.y + camera.cy,
            ))
        }
        CameraKind::FisheyeEquidistant => {
            let norm = p.norm();
            if norm <= 0.0 {
                return Err(GeomError::BehindCamera);
            }
            let r = p.fixed_rows::<2>(0).norm();
            if r < 1e-12 {
                if p.z < 0.0 {
                    return Err(GeomError::BehindCamera);
                }
                return Ok(Vector2::new(camera.cx, camera.cy));
            }
            let theta = r.atan2(p.z);
            let rd = camera.theta_poly(theta);
            Ok(Vector2::new(
                camera.fx * rd * p.x / r + camera.cx,
                camera.fy * rd * p.y / r + camera.cy,
            ))
        }
    }
}

/// Back-project a pixel to a unit bearing in the camera frame.
pub fn unproject(camera: &CameraModel, px: &Vector2<f64>) -> Result<Vector3<f64>, GeomError> {
    let m = Vector2::new((px.x - camera.cx) / camera.fx, (px.y - camera.cy) / camera.fy);
    match camera.kind {
        CameraKind::Pinhole => {
            // Invert the radial-tangential distortion by Newton iteration.
            let mut u = m;
            for _ in 0..12 {
                let f = camera.distort_radtan(&u) - m;
                if f.norm() < 1e-14 {
                    break;
                }
                let j = camera.distort_radtan_jacobian(&u);
                let step = j
                    .lu()
                    .solve(&f)
                    .unwrap_or_else(|| Vector2::zeros());
                u -= step;
            }
            Ok(Vector3::new(u.x, u.y, 1.0).normalize())
        }
        CameraKind::FisheyeEquidistant => {
            let rd = m.norm();
            if rd < 1e-12 {
                return Ok(Vector3::new(0.0, 0.0, 1.0));
            }
            // Solve theta from the theta-polynomial by Newton iteration.
            let mut theta = rd.min(FISHEYE_MAX_THETA);
            for _ in 0..20 {
                let f = camera.theta_poly(theta) - rd;
                let d = camera.theta_poly_deriv(theta);
                theta -= f / d;
                if !theta.is_finite() {
                    return Err(GeomError::OutsideValidCone);
                }
            }
            if !(0.0..=FISHEYE_MAX_THETA).contains(&theta) {
                return Err(GeomError::OutsideValidCone);
            }
            let (s, c) = theta.sin_cos();
            Ok(Vector3::new(s * m.x / rd, s * m.y / rd, c))
        }
    }
}

/// Analytic 2x3 derivative of [`project`] w.r.t. the camera-frame point.
pub fn projection_jacobian(
    camera: &CameraModel,
    p: &Vector3<f64>,
) -> Result<Matrix2x3<f64>, GeomError> {
    match camera.kind {
        CameraKind::Pinhole => {
            if p.z <= 0.0 {
                return Err(GeomError::BehindCamera);
            }
            let iz = 1.0 / p.z;
            let m = Vector2::new(p.x * iz, p.y * iz);
            let jm = Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz);
            let jd = camera.distort_radtan_jacobian(&m);
            let jf = nalgebra::Matrix2::new(camera.fx, 0.0, 0.0, camera.fy);
            Ok(jf * jd * jm)
        }
        CameraKind::FisheyeEquidistant => {
            let norm2 = p.norm_squared();
            if norm2 <= 0.0 {
                return Err(GeomError::BehindCamera);
            }
            let r2 = p.x * p.x + p.y * p.y;
            let r = r2.sqrt();
            if r < 1e-9 {
                if p.z <= 0.0 {
                    return Err(GeomError::BehindCamera);
                }
                // On-axis limit: behaves like an undistorted pinhole.
                let iz = 1.0 / p.z;
                return Ok(Matrix2x3::new(
                    camera.fx * iz,
                    0.0,
                    0.0,
                    0.0,
                    camera.fy * iz,
                    0.0,
                ));
            }
            let theta = r.atan2(p.z);
            let rd = camera.theta_poly(theta);
            let drd = camera.theta_poly_deriv(theta);
            // d(theta)/dp
            let denom = r2 + p.z * p.z;
            let dtheta = Vector3::new(p.z * p.x / (r * denom), p.z * p.y / (r * denom), -r / denom);
            // d(x/r)/dp and d(y/r)/dp
            let r3 = r2 * r;
            let dxr = Vector3::new(p.y * p.y / r3, -p.x * p.y / r3, 0.0);
            let dyr = Vector3::new(-p.x * p.y / r3, p.x * p.x / r3, 0.0);
            let dmx = dtheta * (drd * p.x / r) + dxr * rd;
            let dmy = dtheta * (drd * p.y / r) + dyr * rd;
            Ok(Matrix2x3::new(
                camera.fx * dmx.x,
                camera.fx * dmx.y,
                camera.fx * dmx.z,
                camera.fy * dmy.x,
                camera.fy * dmy.y,
                camera.fy * dmy.z,
            ))
        }
    }
}

/// Deterministic orthonormal basis of the plane perpendicular to `n`.
///
/// Branchless Householder-style construction keyed on the sign of the
/// largest-magnitude arrangement; returns `(b1, b2)` with `b1 x b2 = n`.
pub fn tangent_basis(n: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>), GeomError> {
    if (n.norm() - 1.0).abs() > 1e-9 {
        return Err(GeomError::NotUnit);
    }
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let b1 = Vector3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let b2 = Vector3::new(b, sign + n.y * n.y * a, -n.y);
    Ok((b1, b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn so3_exp_identity_and_yaw() {
        let r = so3_exp(&Vector3::zeros());
        assert_relative_eq!(r.matrix(), Matrix3::identity(), epsilon = 1e-15);

        let r = so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let col0 = r.matrix().column(0).into_owned();
        assert_relative_eq!(col0, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn so3_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let axis = rand_vec3(&mut rng, 1.0).normalize();
            let angle = rng.random_range(1e-6..std::f64::consts::PI - 1e-3);
            let w = axis * angle;
            let back = so3_log(&so3_exp(&w));
            assert_relative_eq!(back, w, epsilon = 1e-10);
        }
    }

    #[test]
    fn skew_matches_cross_product() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let v = Vector3::new(1.0, 0.0, 0.0);
        let w = Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(skew(&v) * w, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = rand_vec3(&mut rng, 5.0);
            let w = rand_vec3(&mut rng, 5.0);
            assert_relative_eq!(skew(&v) * w, v.cross(&w), epsilon = 1e-15);
            assert_relative_eq!(skew(&v).transpose(), -skew(&v), epsilon = 1e-15);
        }
    }

    #[test]
    fn right_jacobian_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rand_vec3(&mut rng, 1.5);
            let dw = rand_vec3(&mut rng, 1.0) * 1e-6;
            let lhs = so3_exp(&(w + dw));
            let rhs = so3_exp(&w).compose(&so3_exp(&(so3_right_jacobian(&w) * dw)));
            assert!(lhs.angle_to(&rhs) < 1e-10);
        }
    }

    #[test]
    fn pose_inverse_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = Pose::new(so3_exp(&rand_vec3(&mut rng, 2.0)), rand_vec3(&mut rng, 3.0));
            let b = Pose::new(so3_exp(&rand_vec3(&mut rng, 2.0)), rand_vec3(&mut rng, 3.0));
            let c = Pose::new(so3_exp(&rand_vec3(&mut rng, 2.0)), rand_vec3(&mut rng, 3.0));
            let p = rand_vec3(&mut rng, 4.0);
            assert_relative_eq!(
                a.compose(&b).compose(&c).transform(&p),
                a.compose(&b.compose(&c)).transform(&p),
                epsilon = 1e-9
            );
            let id = a.compose(&a.inverse());
            assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-9);
            assert!(id.rotation.angle_to(&Rotation::identity()) < 1e-9);
        }
    }

    fn test_pinhole() -> CameraModel {
        CameraModel::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    fn test_fisheye() -> CameraModel {
        CameraModel::fisheye(
            220.0,
            220.0,
            320.0,
            240.0,
            [-0.01, 0.004, -0.002, 0.0005],
            640,
            480,
        )
    }

    #[test]
    fn pinhole_projection_basics() {
        let cam = test_pinhole();
        let px = project(&cam, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(50.0, 50.0), epsilon = 1e-12);
        let px = project(&cam, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(100.0, 50.0), epsilon = 1e-12);
        assert_eq!(
            project(&cam, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeomError::BehindCamera)
        );
    }

    #[test]
    fn unproject_basics() {
        let cam = test_pinhole();
        let b = unproject(&cam, &Vector2::new(50.0, 50.0)).unwrap();
        assert_relative_eq!(b, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cam in [test_pinhole(), test_fisheye()] {
            for _ in 0..500 {
                let px = Vector2::new(
                    rng.random_range(0.0..cam.width as f64),
                    rng.random_range(0.0..cam.height as f64),
                );
                let b = unproject(&cam, &px).unwrap();
                assert!((b.norm() - 1.0).abs() < 1e-12);
                let back = project(&cam, &b).unwrap();
                assert_relative_eq!(back, px, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn fisheye_bearing_round_trip() {
        let cam = test_fisheye();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut count = 0;
        while count < 1000 {
            let b = rand_vec3(&mut rng, 1.0).normalize();
            if b.z < 0.2 {
                continue;
            }
            count += 1;
            let px = project(&cam, &b).unwrap();
            if !cam.in_bounds(&px) {
                continue;
            }
            let back = unproject(&cam, &px).unwrap();
            let angle = back.dot(&b).clamp(-1.0, 1.0).acos();
            // 0.01 px at f=220 is ~5e-5 rad
            assert!(angle < 5e-5, "angle {angle}");
        }
    }

    #[test]
    fn projection_jacobian_on_axis() {
        let cam = test_pinhole();
        let j = projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let expect = Matrix2x3::new(100.0, 0.0, 0.0, 0.0, 100.0, 0.0);
        assert_relative_eq!(j, expect, epsilon = 1e-12);
        let j = projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let expect = Matrix2x3::new(50.0, 0.0, 0.0, 0.0, 50.0, 0.0);
        assert_relative_eq!(j, expect, epsilon = 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pinhole = test_pinhole();
        pinhole.distortion = vec![-0.1, 0.03, 0.001, -0.002];
        for cam in [pinhole, test_fisheye()] {
            let mut done = 0;
            while done < 300 {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..5.0),
                );
                let j = match projection_jacobian(&cam, &p) {
                    Ok(j) => j,
                    Err(_) => continue,
                };
                done += 1;
                let h = 1e-6;
                for axis in 0..3 {
                    let mut dp = Vector3::zeros();
                    dp[axis] = h;
                    let f1 = project(&cam, &(p + dp)).unwrap();
                    let f0 = project(&cam, &(p - dp)).unwrap();
                    let fd = (f1 - f0) / (2.0 * h);
                    let col = j.column(axis).into_owned();
                    let scale = col.norm().max(1.0);
                    assert!(
                        (fd - col).norm() / scale < 1e-4,
                        "cam {:?} axis {axis}: fd {fd:?} vs {col:?}",
                        cam.kind
                    );
                }
            }
        }
    }

    #[test]
    fn tangent_basis_orthonormal() {
        let (b1, b2) = tangent_basis(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(b1.z, 0.0);
        assert_eq!(b2.z, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let n = rand_vec3(&mut rng, 1.0).normalize();
            let (b1, b2) = tangent_basis(&n).unwrap();
            assert!((b1.norm() - 1.0).abs() < 1e-12);
            assert!((b2.norm() - 1.0).abs() < 1e-12);
            assert!(b1.dot(&b2).abs() < 1e-12);
            assert!(b1.dot(&n).abs() < 1e-12);
            assert!(b2.dot(&n).abs() < 1e-12);
        }
        // x-axis case from the edge of the sign switch
        let (b1, b2) = tangent_basis(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((b1.cross(&b2) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        assert_eq!(
            tangent_basis(&Vector3::new(1.0, 1.0, 0.0)),
            Err(GeomError::NotUnit)
        );
    }
}
