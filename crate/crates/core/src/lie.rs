//! SE(3)/SO(3) arithmetic used throughout the back-end.
//!
//! Tangent vectors are ordered `[rho; phi]`: translational part first, then
//! the rotation vector. Rotations carry both a 3×3 matrix and a unit
//! quaternion so that either file representation (KITTI matrices, g2o
//! quaternions) survives a load/save cycle bit-for-bit.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Tolerance on `R·Rᵀ = I` and `det R = 1` accepted by [`Rotation::from_matrix`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Below this angle the closed forms switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Compositions allowed before the rotation is re-projected onto SO(3).
const RENORMALIZE_AFTER: u32 = 64;

/// Distance of the middle Euler angle from ±π/2 that counts as gimbal lock.
pub const GIMBAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("matrix is not a rotation: |R·Rᵀ - I| = {orthogonality:.3e}, det = {det}")]
    NotOrthonormal { orthogonality: f64, det: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("Euler decomposition is degenerate (middle angle {pitch} rad is within {GIMBAL_TOL} of ±π/2)")]
    GimbalLock { pitch: f64 },
    #[error("projected point lies behind the camera (z = {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: fx = {fx}, fy = {fy}")]
    BadIntrinsics { fx: f64, fy: f64 },
}

/// `[v]×`, the cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Element of SO(3).
#[derive(Clone, Copy)]
pub struct Rotation {
    matrix: Matrix3<f64>,
    quat: UnitQuaternion<f64>,
    chain: u32,
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix && self.quat == other.quat
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quat.quaternion();
        write!(f, "Rotation(qw={}, qx={}, qy={}, qz={})", q.w, q.i, q.j, q.k)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity(), quat: UnitQuaternion::identity(), chain: 0 }
    }

    /// Validates orthonormality and a positive determinant within [`ORTHONORMAL_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(LieError::NonFinite("rotation matrix"));
        }
        let orthogonality = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orthogonality > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(LieError::NotOrthonormal { orthogonality, det });
        }
        Ok(Self::from_matrix_unchecked(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        let quat = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m));
        Self { matrix: m, quat, chain: 0 }
    }

    /// Nearest rotation to an arbitrary 3×3 matrix (polar decomposition).
    pub fn orthonormalized(m: &Matrix3<f64>) -> Result<Self, LieError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(LieError::NonFinite("rotation matrix"));
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut fix = Matrix3::identity();
            fix[(2, 2)] = -1.0;
            r = u * fix * v_t;
        }
        Ok(Self::from_matrix_unchecked(r))
    }

    /// The quaternion is kept exactly as given; only the matrix is derived.
    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self { matrix: *q.to_rotation_matrix().matrix(), quat: q, chain: 0 }
    }

    /// Builds from raw `(w, x, y, z)`; normalizes only when the norm is off by more than 1e-12.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, LieError> {
        let q = Quaternion::new(w, x, y, z);
        if !q.coords.iter().all(|c| c.is_finite()) {
            return Err(LieError::NonFinite("quaternion"));
        }
        let norm = q.norm();
        if norm < 1e-6 {
            return Err(LieError::NotOrthonormal { orthogonality: 1.0, det: norm * norm });
        }
        let unit = if (norm - 1.0).abs() > 1e-12 {
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        Ok(Self::from_quaternion(unit))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.quat
    }

    pub fn inverse(&self) -> Self {
        Self { matrix: self.matrix.transpose(), quat: self.quat.inverse(), chain: self.chain }
    }

    pub fn compose(&self, other: &Self) -> Self {
        let chain = self.chain.max(other.chain) + 1;
        let quat = self.quat * other.quat;
        if chain > RENORMALIZE_AFTER {
            let quat = UnitQuaternion::new_normalize(quat.into_inner());
            return Self::from_quaternion(quat);
        }
        Self { matrix: self.matrix * other.matrix, quat, chain }
    }

    /// Re-projects onto SO(3) from the quaternion and resets the composition counter.
    pub fn renormalized(&self) -> Self {
        Self::from_quaternion(UnitQuaternion::new_normalize(self.quat.into_inner()))
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }

    /// Rotation vector with `|phi| ≤ π`.
    pub fn log(&self) -> Vector3<f64> {
        so3_log_unchecked(&self.matrix)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = vee(&self.matrix).norm();
        let c = (self.matrix.trace() - 1.0) * 0.5;
        s.atan2(c)
    }
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b, half) = if theta < SMALL_ANGLE {
        (
            1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            0.5 - theta_sq / 48.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq, (0.5 * theta).sin() / theta)
    };
    let k = skew(phi);
    let matrix = Matrix3::identity() + k * a + k * k * b;
    let w = if theta < SMALL_ANGLE { 1.0 - theta_sq / 8.0 } else { (0.5 * theta).cos() };
    let quat = UnitQuaternion::new_unchecked(Quaternion::new(w, phi.x * half, phi.y * half, phi.z * half));
    Rotation { matrix, quat, chain: 0 }
}

/// Logarithm of an arbitrary matrix, validating it is a rotation first.
pub fn so3_log(m: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    Rotation::from_matrix(*m).map(|r| r.log())
}

fn so3_log_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    let axis_sin = vee(m);
    let s = axis_sin.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ≈ 1 + theta²/6
        return axis_sin * (1.0 + theta * theta / 6.0);
    }
    if c > -0.99 {
        return axis_sin * (theta / s);
    }

    // Near π: recover the axis from the symmetric part, R + Rᵀ = 2cI + 2(1-c)aaᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
    let k = (0..3).max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)])).unwrap();
    let mut axis: Vector3<f64> = outer.column(k) / outer[(k, k)].sqrt();
    axis /= axis.norm();
    let alignment = axis.dot(&axis_sin);
    if alignment.abs() > 1e-14 {
        if alignment < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Left Jacobian of SO(3), `V(phi)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta_sq, (theta - theta.sin()) / (theta_sq * theta))
    };
    let k = skew(phi);
    Matrix3::identity() + k * b + k * k * c
}

/// Inverse of [`so3_left_jacobian`].
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        1.0 / theta_sq - (0.5 * theta).cos() / (0.5 * theta).sin() / (2.0 * theta)
    };
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (c1, c2, c3) = if theta < 1e-4 {
        (1.0 / 6.0 - theta_sq / 120.0, 1.0 / 24.0 - theta_sq / 720.0, 1.0 / 120.0 - theta_sq / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta_sq * theta_sq;
        (
            (theta - s) / (theta_sq * theta),
            (theta_sq + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) for `[rho; phi]` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let j_inv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-j_inv * q * j_inv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// `J_r⁻¹(xi) = J_l⁻¹(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist::new(-xi.rho, -xi.phi))
}

/// Matrix of the Lie bracket `ad(xi)` on `[rho; phi]`.
pub fn se3_ad(xi: &Twist) -> Matrix6<f64> {
    let p = skew(&xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&p);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&xi.rho));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&p);
    out
}

/// Element of se(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { rho: v.fixed_rows::<3>(0).into(), phi: v.fixed_rows::<3>(3).into() }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn norm_squared(&self) -> f64 {
        self.rho.norm_squared() + self.phi.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rho: self.rho * s, phi: self.phi * s }
    }
}

/// Rigid-body transform `[R t; 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Rotation::identity(), translation: t }
    }

    /// Validated construction from a rotation matrix and a translation.
    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, LieError> {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(LieError::NonFinite("translation"));
        }
        Ok(Self { rotation: Rotation::from_matrix(r)?, translation: t })
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self { translation: -rotation.rotate(&self.translation), rotation }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    /// `self⁻¹ · other`, the motion from `self` to `other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn renormalized(&self) -> Self {
        Self { rotation: self.rotation.renormalized(), translation: self.translation }
    }

    /// Adjoint `Ad_T` acting on `[rho; phi]`: `[[R, t×R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&self.translation) * r));
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        out
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }

    pub fn exp(xi: &Twist) -> Pose {
        se3_exp(xi)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose { rotation: so3_exp(&xi.phi), translation: so3_left_jacobian(&xi.phi) * xi.rho }
}

pub fn se3_log(t: &Pose) -> Twist {
    let phi = t.rotation.log();
    Twist { rho: so3_left_jacobian_inv(&phi) * t.translation, phi }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(t: &Pose) -> Pose {
    t.inverse()
}

/// Relative motion as emitted by a pose network: three Euler angles plus a translation.
///
/// Convention: intrinsic Z-Y-X, `R = Rz(euler[2]) · Ry(euler[1]) · Rx(euler[0])`,
/// i.e. `euler = (roll about x, pitch about y, yaw about z)` in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerEdge {
    pub euler: Vector3<f64>,
    pub translation: Vector3<f64>,
}

/// Label written into edge-file headers.
pub const EULER_CONVENTION: &str = "ZYX-intrinsic(roll_x,pitch_y,yaw_z)";

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub fn pose_from_euler_edge(e: &EulerEdge) -> Pose {
    let rx = so3_exp(&Vector3::new(e.euler.x, 0.0, 0.0));
    let ry = so3_exp(&Vector3::new(0.0, e.euler.y, 0.0));
    let rz = so3_exp(&Vector3::new(0.0, 0.0, e.euler.z));
    Pose { rotation: rz.compose(&ry).compose(&rx), translation: e.translation }
}

pub fn euler_edge_from_pose(t: &Pose) -> Result<EulerEdge, LieError> {
    let r = t.rotation.matrix();
    let cos_pitch = r[(0, 0)].hypot(r[(1, 0)]);
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    if (pitch.abs() - PI / 2.0).abs() < GIMBAL_TOL {
        return Err(LieError::GimbalLock { pitch });
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Ok(EulerEdge {
        euler: Vector3::new(wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw)),
        translation: t.translation,
    })
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, LieError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(LieError::BadIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Depth of the point in the target view.
    pub depth: f64,
}

/// Warps pixel `p_i` of view i, seen at z-depth `depth`, into view j: `p_j ~ K T_ij D_i K⁻¹ p_i`.
///
/// `t_ij` maps points expressed in view i's camera frame into view j's.
pub fn project_pixel(
    p_i: &Vector3<f64>,
    depth: f64,
    t_ij: &Pose,
    k: &CameraIntrinsics,
) -> Result<Projection, LieError> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(LieError::NonPositiveDepth(depth));
    }
    let u = p_i.x / p_i.z;
    let v = p_i.y / p_i.z;
    let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let x_j = t_ij.transform_point(&(ray * depth));
    if x_j.z <= 0.0 {
        return Err(LieError::BehindCamera { depth: x_j.z });
    }
    Ok(Projection { pixel: Vector2::new(k.fx * x_j.x / x_j.z + k.cx, k.fy * x_j.y / x_j.z + k.cy), depth: x_j.z })
}
