//! Rigid-body and plane geometry.
//!
//! Poses live in SE(3) with a unit quaternion for rotation. Tangent vectors
//! are ordered `(rot, trans)` everywhere, and perturbations are applied on the
//! right: `boxplus(P, xi) = P * exp(xi)`.
//!
//! Planes use the convention `normal . x + offset = 0`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use nalgebra::{Matrix3, Matrix6, Quaternion, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Angular distance from the poles inside which spherical plane coordinates
/// are refused.
pub const POLE_GUARD: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate plane fit: {0}")]
    DegenerateFit(String),
    #[error("plane normal {0:?} is within the pole guard of the z axis")]
    PoleSingularity([f64; 3]),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*omega)
}

/// Rotation vector of a unit quaternion, angle in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < 1e-8 {
        // atan2(n, w) / n ~ 1/w - n^2 / (3 w^3)
        v * (2.0 / w - 2.0 * n * n / (3.0 * w * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Left Jacobian of SO(3); maps rotation rates to translation for the SE(3)
/// exponential.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
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
    Mat3::identity() + w * a + w * w * b
}

pub fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Mat3::identity() - w * 0.5 + w * w * c
}

pub fn so3_right_jacobian_inv(omega: &Vec3) -> Mat3 {
    so3_left_jacobian_inv(&(-omega))
}

/// Coupling block of the SE(3) left Jacobian, written for a `(rot, trans)`
/// tangent so the full Jacobian is `[[J, 0], [Q, J]]`.
fn se3_left_coupling(omega: &Vec3, rho: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + theta2 * theta2 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + theta2 * theta2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        (
            (theta - s) / t3,
            (0.5 * theta2 + c - 1.0) / t4,
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    r * 0.5 + (wr + rw + wrw) * c1 + (w * wr + rw * w - wrw * 3.0) * c2 + (wrw * w + w * wrw) * c3
}

/// Inverse of the SE(3) right Jacobian at `xi`: the derivative of
/// `log(exp(xi) * exp(delta))` with respect to `delta` at zero.
pub fn se3_right_jacobian_inv(xi: &Tangent6) -> Mat6 {
    let a_inv = so3_right_jacobian_inv(&xi.rot);
    let b = se3_left_coupling(&(-xi.rot), &(-xi.trans));
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&a_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&a_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-a_inv * b * a_inv));
    out
}

/// Element of the SE(3) tangent space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent6 {
    /// Axis-angle, radians.
    pub rot: Vec3,
    /// Meters.
    pub trans: Vec3,
}

impl Tangent6 {
    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            rot: v.fixed_rows::<3>(0).into_owned(),
            trans: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.rot.x,
            self.rot.y,
            self.rot.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid-body transform mapping local coordinates into the parent frame.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "Pose(t=[{}, {}, {}], q=[{}, {}, {}, {}])",
            self.translation.x, self.translation.y, self.translation.z, q.i, q.j, q.k, q.w
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::new(x, y, z))
    }

    /// Builds a pose from a rotation matrix whose columns are the local axes
    /// expressed in the parent frame.
    pub fn from_axes(x_axis: Vec3, y_axis: Vec3, z_axis: Vec3, translation: Vec3) -> Self {
        let m = Mat3::from_columns(&[x_axis, y_axis, z_axis]);
        debug_assert!(m.determinant() > 0.0, "axes must form a right-handed frame");
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Pose with only a heading about the world z axis.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    /// Quaternion stored as given; callers are responsible for unit norm.
    pub fn from_raw_parts(translation: [f64; 3], xyzw: [f64; 4]) -> Self {
        let q = Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]);
        Self::new(UnitQuaternion::new_unchecked(q), Vec3::from(translation))
    }

    /// `(translation, [qx, qy, qz, qw])`.
    pub fn to_raw_parts(&self) -> ([f64; 3], [f64; 4]) {
        let q = self.rotation.quaternion();
        (
            [self.translation.x, self.translation.y, self.translation.z],
            [q.i, q.j, q.k, q.w],
        )
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose::new(
            UnitQuaternion::new_normalize(q),
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn exp(xi: &Tangent6) -> Pose {
        Pose::new(so3_exp(&xi.rot), so3_left_jacobian(&xi.rot) * xi.trans)
    }

    pub fn log(&self) -> Tangent6 {
        let rot = so3_log(&self.rotation);
        Tangent6::new(rot, so3_left_jacobian_inv(&rot) * self.translation)
    }

    pub fn boxplus(&self, xi: &Tangent6) -> Pose {
        self.compose(&Pose::exp(xi))
    }

    /// `log(other^-1 * self)`: the right-perturbation that carries `other`
    /// onto `self`.
    pub fn boxminus(&self, other: &Pose) -> Tangent6 {
        other.inverse().compose(self).log()
    }

    /// Adjoint for `(rot, trans)` tangents: `P exp(xi) P^-1 = exp(Ad * xi)`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation_matrix();
        let mut out = Mat6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        out.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * r));
        out
    }

    /// Local z axis in the parent frame.
    pub fn z_axis(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    pub fn x_axis(&self) -> Vec3 {
        self.rotation * Vec3::x()
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn boxminus(a: &Pose, b: &Pose) -> Tangent6 {
    a.boxminus(b)
}

pub fn boxplus(p: &Pose, xi: &Tangent6) -> Pose {
    p.boxplus(xi)
}

/// Oriented infinite plane, `normal . x + offset = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Normalizes `normal` and scales `offset` with it.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn from_point_normal(point: &Vec3, normal: &Vec3) -> Self {
        let n = normal.normalize();
        Self {
            normal: n,
            offset: -n.dot(point),
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn flipped(&self) -> Plane {
        Plane {
            normal: -self.normal,
            offset: -self.offset,
        }
    }

    /// Flips the plane so that `observer` lies on the side the normal points to.
    pub fn canonicalized_toward(&self, observer: &Vec3) -> Plane {
        if self.signed_distance(observer) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }

    /// Point of the plane closest to the origin. Invariant under sign flips.
    pub fn closest_point_to_origin(&self) -> Vec3 {
        -self.offset * self.normal
    }
}

/// Wall vertex chart: azimuth and elevation of the normal plus the offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPlane {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl SphericalPlane {
    pub fn new(azimuth: f64, elevation: f64, distance: f64) -> Self {
        Self {
            azimuth,
            elevation,
            distance,
        }
    }

    pub fn normal(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vec3::new(ce * ca, ce * sa, se)
    }

    /// Partial derivatives of the unit normal with respect to azimuth and
    /// elevation.
    pub fn normal_derivatives(&self) -> (Vec3, Vec3) {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        (
            Vec3::new(-ce * sa, ce * ca, 0.0),
            Vec3::new(-se * ca, -se * sa, ce),
        )
    }

    /// Brings the coordinates back into the chart: azimuth wrapped into
    /// `(-pi, pi]` and elevation folded into `[-pi/2, pi/2]` without changing
    /// the plane.
    pub fn normalized(&self) -> SphericalPlane {
        let mut az = self.azimuth;
        let mut el = wrap_angle(self.elevation);
        if el > FRAC_PI_2 {
            el = PI - el;
            az += PI;
        } else if el < -FRAC_PI_2 {
            el = -PI - el;
            az += PI;
        }
        SphericalPlane::new(wrap_angle(az), el, self.distance)
    }
}

pub fn plane_to_spherical(p: &Plane) -> Result<SphericalPlane, GeometryError> {
    let n = p.normal;
    if n.z.abs() >= POLE_GUARD.cos() {
        return Err(GeometryError::PoleSingularity([n.x, n.y, n.z]));
    }
    Ok(SphericalPlane::new(
        n.y.atan2(n.x),
        n.z.clamp(-1.0, 1.0).asin(),
        p.offset,
    ))
}

pub fn spherical_to_plane(s: &SphericalPlane) -> Plane {
    Plane {
        normal: s.normal(),
        offset: s.distance,
    }
}

/// Initial wall estimate from a marker: the plane through the marker origin
/// with the marker z axis as normal.
pub fn plane_from_marker(marker_pose: &Pose) -> Plane {
    Plane::from_point_normal(&marker_pose.translation, &marker_pose.z_axis())
}

/// Expresses a parent-frame plane in the local frame of `frame`, so that
/// `x_local` is on the result iff `frame * x_local` is on `p`.
pub fn plane_in_frame(frame: &Pose, p: &Plane) -> Plane {
    Plane {
        normal: frame.rotation.inverse() * p.normal,
        offset: p.offset + p.normal.dot(&frame.translation),
    }
}

/// Total least-squares plane through `points`, sign-matched to `init`.
pub fn plane_refine(points: &[Vec3], init: &Plane) -> Result<Plane, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateFit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let cov = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if largest <= 0.0 || middle <= 1e-12 * largest {
        return Err(GeometryError::DegenerateFit(format!(
            "points are collinear (eigenvalues {smallest:e}, {middle:e}, {largest:e})"
        )));
    }
    let normal = eig.eigenvectors.column(order[0]).normalize();
    let plane = Plane::from_point_normal(&centroid, &normal);
    Ok(if plane.normal.dot(&init.normal) < 0.0 {
        plane.flipped()
    } else {
        plane
    })
}
