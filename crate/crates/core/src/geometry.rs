//! Pinhole camera, rigid poses and reprojection error.
//!
//! Poses are **camera-to-world**: `Pose::transform` maps a camera-frame point
//! into the world frame, and a world point `y` reaches the image as
//! `K * pose.inverse() * y`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Minimum camera-frame depth for a projection to count as valid (meters).
pub const MIN_DEPTH: f64 = 0.1;

/// Depth of the dummy coordinate used as target for invalid predictions (meters).
pub const DUMMY_DEPTH: f64 = 10.0;

/// Below this rotation angle exp/log use Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height)
    }

    /// Pixel of a camera-frame point, without any depth check.
    #[inline]
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Camera-frame ray through a pixel, normalised to z = 1.
    #[inline]
    pub fn unproject(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < f64::from(self.width) && uv.y < f64::from(self.height)
    }
}

/// World-frame 3D point (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCoordinate(pub Vector3<f64>);

impl SceneCoordinate {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Image-plane location of a patch center (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint(pub Vector2<f64>);

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self(Vector2::new(u, v))
    }
}

/// Outcome of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(PixelPoint),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<PixelPoint> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a (not necessarily normalised) quaternion `w, x, y, z`.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        ));
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    /// Rotation as a unit quaternion `w, x, y, z` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// Camera with center `eye` looking at `target`; image y points along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        Self { rotation: Matrix3::from_columns(&[x, y, z]), translation: eye }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies the inverse transform (world to camera for a camera-to-world pose).
    #[inline]
    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Deviation from orthonormality: `max(|RᵀR - I|, |det R - 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Projects the rotation back onto SO(3).
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Pose { rotation: r, translation: self.translation }
    }
}

pub fn pose_inverse(h: &Pose) -> Pose {
    h.inverse()
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Perspective projection of world point `y` seen from camera-to-world pose `h`.
pub fn project(y: &SceneCoordinate, h: &Pose, k: &CameraIntrinsics) -> Projection {
    let pc = h.inverse_transform(&y.0);
    if pc.z <= MIN_DEPTH {
        return Projection::BehindCamera;
    }
    Projection::Pixel(PixelPoint(k.project_camera(&pc)))
}

/// Pixel distance between `p` and the projection of `y` under the ground-truth
/// pose, or `None` when the point projects from behind the camera.
pub fn reprojection_error(
    p: &PixelPoint,
    y: &SceneCoordinate,
    h_star: &Pose,
    k: &CameraIntrinsics,
) -> Option<f64> {
    project(y, h_star, k).pixel().map(|q| (p.0 - q.0).norm())
}

/// World point that back-projects `p` at camera-frame depth [`DUMMY_DEPTH`].
pub fn dummy_coordinate(p: &PixelPoint, h_star: &Pose, k: &CameraIntrinsics) -> SceneCoordinate {
    let pc = k.unproject(&p.0) * DUMMY_DEPTH;
    SceneCoordinate(h_star.transform(&pc))
}

/// Skew-symmetric cross-product matrix.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// SO(3) logarithm, returning the rotation vector with angle in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * vee.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) ≈ 1/2 + θ²/12
        return vee * (0.5 + theta * theta / 12.0);
    }
    if cos > -0.99 {
        return vee * (theta / (2.0 * sin));
    }
    // Near π the antisymmetric part vanishes; recover the axis from R + Rᵀ.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let d = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
    let i = d.imax();
    let mut axis = b.column(i).into_owned();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3), `V` in `t = V ρ`.
fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * b + k * k * c
}

/// SE(3) exponential of a twist `[ρ; ω]` (translation part first).
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    Pose { rotation: so3_exp(&w), translation: so3_left_jacobian(&w) * rho }
}

/// SE(3) logarithm, inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(h: &Pose) -> Vector6<f64> {
    let w = so3_log(&h.rotation);
    let v = so3_left_jacobian(&w);
    let rho = v.lu().solve(&h.translation).unwrap_or(h.translation);
    Vector6::new(rho.x, rho.y, rho.z, w.x, w.y, w.z)
}
