//! Residuals of every factor kind together with their analytic Jacobians.
//!
//! Jacobians are taken with respect to the node retractions used by the
//! optimizer: right perturbation for keyframe and marker poses, additive
//! world-frame translation for doorways, additive `[azimuth, elevation,
//! distance]` for walls and additive 3-vectors for room and corridor centers.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, RowVector3, Vector3};
use thiserror::Error;

use crate::geometry::{
    plane_in_frame, se3_right_jacobian_inv, spherical_to_plane, wrap_angle, GeometryError, Plane,
    Pose, SphericalPlane, Vec3, POLE_GUARD,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResidualError {
    #[error("walls are not parallel (|cos| = {0:.6})")]
    NotParallel(f64),
    #[error("wall pairs are not perpendicular (|cos| = {0:.6})")]
    NotPerpendicular(f64),
    #[error("walls are {0:.4} m apart, below the minimum gap")]
    DegenerateGap(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Tolerances shared by the center formulas and space formation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterTolerances {
    /// Radians.
    pub parallel_tol: f64,
    /// Meters.
    pub gap_min: f64,
}

impl Default for CenterTolerances {
    fn default() -> Self {
        Self {
            parallel_tol: 10f64.to_radians(),
            gap_min: 0.01,
        }
    }
}

/// `log(m_global^-1 * k * meas_local)`: zero when the marker pose predicted
/// from the keyframe agrees with the marker node.
pub fn residual_marker(k: &Pose, m_global: &Pose, meas_local: &Pose) -> [f64; 6] {
    k.compose(meas_local).boxminus(m_global).to_vector().into()
}

/// Blocks with respect to `(keyframe, marker)`.
pub fn jacobian_marker(
    k: &Pose,
    m_global: &Pose,
    meas_local: &Pose,
) -> (Matrix6<f64>, Matrix6<f64>) {
    let err = m_global.inverse().compose(k).compose(meas_local);
    let jr_inv = se3_right_jacobian_inv(&err.log());
    (
        jr_inv * meas_local.inverse().adjoint(),
        -jr_inv * err.inverse().adjoint(),
    )
}

/// `log(meas^-1 * k_i^-1 * k_j)`.
pub fn residual_odometry(k_i: &Pose, k_j: &Pose, meas: &Pose) -> [f64; 6] {
    k_i.inverse().compose(k_j).boxminus(meas).to_vector().into()
}

/// Blocks with respect to `(k_i, k_j)`.
pub fn jacobian_odometry(k_i: &Pose, k_j: &Pose, meas: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
    let rel = k_i.inverse().compose(k_j);
    let jr_inv = se3_right_jacobian_inv(&rel.boxminus(meas));
    (-jr_inv * rel.inverse().adjoint(), jr_inv)
}

fn marker_frame_angles(n: &Vec3) -> Result<(f64, f64), ResidualError> {
    if n.y.abs() >= POLE_GUARD.cos() {
        return Err(GeometryError::PoleSingularity([n.x, n.y, n.z]).into());
    }
    Ok((n.x.atan2(n.z), n.y.clamp(-1.0, 1.0).asin()))
}

/// Wall-to-marker disagreement measured in the marker frame.
///
/// The wall is expressed in the marker frame, where the marker's own plane
/// has normal `+z` through the origin. The angular components are the
/// azimuth (`atan2(n_x, n_z)`) and elevation (`asin(n_y)`) of the local wall
/// normal relative to `+z`; the last component is the wall offset in that
/// frame, i.e. the signed distance from the marker origin to the wall.
pub fn residual_wall_marker(w: &SphericalPlane, m: &Pose) -> Result<[f64; 3], ResidualError> {
    let local = plane_in_frame(m, &spherical_to_plane(w));
    let (az, el) = marker_frame_angles(&local.normal)?;
    Ok([wrap_angle(az), wrap_angle(el), local.offset])
}

/// Blocks with respect to `(marker, wall)`.
pub fn jacobian_wall_marker(
    w: &SphericalPlane,
    m: &Pose,
) -> Result<(Matrix3x6<f64>, Matrix3<f64>), ResidualError> {
    let plane = spherical_to_plane(w);
    let local = plane_in_frame(m, &plane);
    let n = local.normal;
    marker_frame_angles(&n)?;
    let xz = n.x * n.x + n.z * n.z;
    let d_az = RowVector3::new(n.z / xz, 0.0, -n.x / xz);
    let d_el = RowVector3::new(0.0, 1.0 / (1.0 - n.y * n.y).sqrt(), 0.0);
    let angles = Matrix3::from_rows(&[d_az, d_el, RowVector3::zeros()]);

    let mut j_marker = Matrix3x6::zeros();
    let dn_domega = crate::geometry::hat(&n);
    j_marker
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(angles * dn_domega));
    j_marker
        .fixed_view_mut::<1, 3>(2, 3)
        .copy_from(&n.transpose());

    let rt = m.rotation.inverse().to_rotation_matrix().into_inner();
    let (dn_daz, dn_del) = w.normal_derivatives();
    let mut j_wall = Matrix3::zeros();
    for (col, dn) in [dn_daz, dn_del].iter().enumerate() {
        let dnl = rt * dn;
        let da = d_az.dot(&dnl.transpose());
        let de = d_el.dot(&dnl.transpose());
        j_wall[(0, col)] = da;
        j_wall[(1, col)] = de;
        j_wall[(2, col)] = dn.dot(&m.translation);
    }
    j_wall[(2, 2)] = 1.0;
    Ok((j_marker, j_wall))
}

/// Sign that flips `b`'s normal onto `a`'s for a nearly parallel pair.
fn parallel_pair(a: &Plane, b: &Plane, tol: &CenterTolerances) -> Result<f64, ResidualError> {
    let c = a.normal.dot(&b.normal);
    if c.abs() < tol.parallel_tol.cos() {
        return Err(ResidualError::NotParallel(c.abs()));
    }
    Ok(if c < 0.0 { -1.0 } else { 1.0 })
}

fn pair_gap(a: &Plane, b: &Plane, sign: f64) -> f64 {
    let shared = (a.normal + sign * b.normal).normalize();
    shared
        .dot(&(a.closest_point_to_origin() - b.closest_point_to_origin()))
        .abs()
}

fn check_pair(a: &Plane, b: &Plane, tol: &CenterTolerances) -> Result<f64, ResidualError> {
    let sign = parallel_pair(a, b, tol)?;
    let gap = pair_gap(a, b, sign);
    if gap <= tol.gap_min {
        return Err(ResidualError::DegenerateGap(gap));
    }
    Ok(sign)
}

/// Center of a two-wall space: the point on the mid-plane between the walls
/// whose components orthogonal to the wall normal are those of
/// `marker_center`.
pub fn corridor_center(
    wall_a: &Plane,
    wall_b: &Plane,
    marker_center: &Vec3,
    tol: &CenterTolerances,
) -> Result<Vec3, ResidualError> {
    let sign = check_pair(wall_a, wall_b, tol)?;
    let shared = (wall_a.normal + sign * wall_b.normal).normalize();
    let mid = 0.5 * (wall_a.closest_point_to_origin() + wall_b.closest_point_to_origin());
    Ok(marker_center + shared * shared.dot(&(mid - marker_center)))
}

pub fn residual_corridor(
    r: &Vec3,
    wall_a: &Plane,
    wall_b: &Plane,
    marker_center: &Vec3,
    tol: &CenterTolerances,
) -> Result<Vec3, ResidualError> {
    Ok(r - corridor_center(wall_a, wall_b, marker_center, tol)?)
}

/// Derivatives of the plane's closest-to-origin point `-d n` and of its normal
/// with respect to `[azimuth, elevation, distance]`.
fn spherical_point_derivatives(w: &SphericalPlane) -> (Matrix3<f64>, Matrix3<f64>) {
    let n = w.normal();
    let (dn_daz, dn_del) = w.normal_derivatives();
    let dp = Matrix3::from_columns(&[-w.distance * dn_daz, -w.distance * dn_del, -n]);
    let dn = Matrix3::from_columns(&[dn_daz, dn_del, Vector3::zeros()]);
    (dp, dn)
}

/// Blocks of the corridor residual with respect to `(corridor, wall_a, wall_b)`.
pub fn jacobian_corridor(
    wall_a: &SphericalPlane,
    wall_b: &SphericalPlane,
    marker_center: &Vec3,
    tol: &CenterTolerances,
) -> Result<[Matrix3<f64>; 3], ResidualError> {
    let (pa, pb) = (spherical_to_plane(wall_a), spherical_to_plane(wall_b));
    let sign = check_pair(&pa, &pb, tol)?;
    let u = pa.normal + sign * pb.normal;
    let un = u.norm();
    let shared = u / un;
    let mid = 0.5 * (pa.closest_point_to_origin() + pb.closest_point_to_origin());
    let rel = mid - marker_center;
    let proj = Matrix3::identity() - shared * shared.transpose();
    let d_shared_du = proj / un;
    let d_eta_dshared = shared * rel.transpose() + Matrix3::identity() * shared.dot(&rel);
    let d_eta_dmid = shared * shared.transpose();

    let block = |w: &SphericalPlane, s: f64| {
        let (dp, dn) = spherical_point_derivatives(w);
        let d_eta = d_eta_dmid * (0.5 * dp) + d_eta_dshared * d_shared_du * (s * dn);
        -d_eta
    };
    Ok([Matrix3::identity(), block(wall_a, 1.0), block(wall_b, sign)])
}

/// Center of a rectangular room on the floor plane: the horizontal part of
/// the sum of the between-wall midpoint vectors of the x pair and the y pair.
/// Keeping z at 0 stops small wall tilts, amplified by the walls' distance
/// from the origin, from moving the center vertically.
pub fn room_center(
    wx_a: &Plane,
    wx_b: &Plane,
    wy_a: &Plane,
    wy_b: &Plane,
    tol: &CenterTolerances,
) -> Result<Vec3, ResidualError> {
    check_pair(wx_a, wx_b, tol)?;
    check_pair(wy_a, wy_b, tol)?;
    let c = wx_a.normal.dot(&wy_a.normal).abs();
    if c > tol.parallel_tol.sin() {
        return Err(ResidualError::NotPerpendicular(c));
    }
    let qx = 0.5 * (wx_a.closest_point_to_origin() + wx_b.closest_point_to_origin());
    let qy = 0.5 * (wy_a.closest_point_to_origin() + wy_b.closest_point_to_origin());
    let q = qx + qy;
    Ok(Vec3::new(q.x, q.y, 0.0))
}

pub fn residual_room(
    r: &Vec3,
    walls: [&Plane; 4],
    tol: &CenterTolerances,
) -> Result<Vec3, ResidualError> {
    Ok(r - room_center(walls[0], walls[1], walls[2], walls[3], tol)?)
}

/// Blocks of the room residual with respect to `(room, wx_a, wx_b, wy_a, wy_b)`.
pub fn jacobian_room(
    walls: [&SphericalPlane; 4],
    tol: &CenterTolerances,
) -> Result<[Matrix3<f64>; 5], ResidualError> {
    let planes = walls.map(spherical_to_plane);
    room_center(&planes[0], &planes[1], &planes[2], &planes[3], tol)?;
    let mut out = [Matrix3::identity(); 5];
    for (i, w) in walls.iter().enumerate() {
        out[i + 1] = -0.5 * spherical_point_derivatives(w).0;
        out[i + 1].row_mut(2).fill(0.0);
    }
    Ok(out)
}

/// `meas_delta - (door translation - center)`.
pub fn residual_doorway(d: &Pose, r_center: &Vec3, meas_delta: &Vec3) -> Vec3 {
    meas_delta - (d.translation - r_center)
}
