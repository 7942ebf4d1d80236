//! Rigid-body transforms: SE(3) poses stored as unit quaternion + translation,
//! and their se(3) tangent vectors.
//!
//! Tangent vectors are ordered rotation-first, `(ω, v)`. The optimizer uses
//! the right-multiplicative update `T ← T·exp(ξ)`, so the Jacobians exported
//! here are right Jacobians.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the closed-form coefficients are replaced by
/// their Taylor series.
const SMALL_ANGLE: f64 = 1e-2;

/// A rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// An element of se(3), rotation part first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(t=[{:.6}, {:.6}, {:.6}], q=[w {:.6}, x {:.6}, y {:.6}, z {:.6}])",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)`; the
    /// quaternion is normalized.
    pub fn from_parts(translation: Vector3<f64>, w: f64, x: f64, y: f64, z: f64) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self::new(rotation, translation)
    }

    /// Builds a pose from a rotation matrix that is already orthonormal.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// `self · other`, renormalized.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = UnitQuaternion::new_normalize(
            self.rotation.into_inner() * other.rotation.into_inner(),
        );
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// `self⁻¹ · other`: the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn rotate_vector(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4×4 form.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        let (w, n) = (q.w.abs(), q.imag().norm());
        2.0 * n.atan2(w)
    }

    /// Exponential map of se(3), including the coupling of rotation into
    /// translation through the left Jacobian of SO(3).
    pub fn exp(xi: &Twist) -> Pose {
        let rotation = UnitQuaternion::from_scaled_axis(xi.rotation);
        let v = so3_left_jacobian(&xi.rotation);
        Pose {
            rotation,
            translation: v * xi.translation,
        }
    }

    /// Logarithm map. Fails when the rotation angle is π, where the axis
    /// sign is ambiguous.
    pub fn log(&self) -> Result<Twist> {
        let q = self.rotation.quaternion();
        let (w, imag) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        if w <= f64::EPSILON {
            return Err(Error::AngleAmbiguity);
        }
        let n = imag.norm();
        let scale = if n < 1e-8 {
            // 2·atan(n/w)/n expanded around n = 0
            2.0 / w * (1.0 - n * n / (3.0 * w * w))
        } else {
            2.0 * n.atan2(w) / n
        };
        let omega = imag * scale;
        let v_inv = so3_left_jacobian_inverse(&omega);
        Ok(Twist {
            rotation: omega,
            translation: v_inv * self.translation,
        })
    }

    /// Adjoint in `(ω, v)` ordering: `T·exp(ξ)·T⁻¹ = exp(Ad(T)·ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.translation.norm(), d.rotation_angle())
    }

    pub fn is_finite(&self) -> bool {
        let q = self.rotation.quaternion();
        q.coords.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3), which is also the V matrix of the SE(3)
/// exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// The coupling block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t4 = theta2 * theta2;
        (
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        let t5 = t4 * theta;
        let a = (theta - s) / t3;
        let b = (theta2 + 2.0 * co - 2.0) / (2.0 * t4);
        let c = -0.5 * ((1.0 - theta2 / 2.0 - co) / t4 - 3.0 * (theta - s - t3 / 6.0) / t5);
        (a, b, c)
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r * 0.5 + (pr + rp + prp) * a + (ppr + rpp - prp * 3.0) * b + (prp * p + p * prp) * c
}

/// Inverse of the SE(3) right Jacobian, `(ω, v)` ordering:
/// `log(exp(ξ)·exp(δ)) ≈ ξ + Jr⁻¹(ξ)·δ`.
pub fn se3_right_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    // Jr(ξ) = Jl(−ξ)
    let phi = -xi.rotation;
    let rho = -xi.translation;
    let a = so3_left_jacobian_inverse(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&a);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(a * q * a)));
    m
}

/// SE(3) right Jacobian, `(ω, v)` ordering.
pub fn se3_right_jacobian(xi: &Twist) -> Matrix6<f64> {
    let phi = -xi.rotation;
    let rho = -xi.translation;
    let j = so3_left_jacobian(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    m
}
