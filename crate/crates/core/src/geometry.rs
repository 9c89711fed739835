//! Rigid-body arithmetic on SE(3) with rotation-vector (axis-angle) rotations.
//!
//! Everything here is a pure function on small value types. Rotations are
//! stored canonically: the angle `|r|` lies in `[0, π]`, and at exactly `π`
//! the first non-zero component of the axis is positive.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Below this angle Rodrigues' formula switches to its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-7;
/// Orthonormality tolerance accepted by [`matrix_to_rotvec`].
const ORTHO_TOL: f64 = 1e-6;
/// Minimum triangle area (m²) spanned by the three hand keypoints.
const MIN_KEYPOINT_AREA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not orthonormal (max deviation {deviation:.3e}, det {det:.6})")]
    NonOrthonormalInput { deviation: f64, det: f64 },
    #[error("hand keypoints are collinear or coincident (triangle area {area:.3e} m²)")]
    DegenerateKeypoints { area: f64 },
}

/// A rotation stored as axis × angle (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotVec3(pub Vector3<f64>);

impl RotVec3 {
    pub fn identity() -> Self {
        Self(Vector3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Wraps the angle into `[0, π]`, flipping the axis where needed.
    pub fn canonical(&self) -> Self {
        let theta = self.0.norm();
        if theta <= PI {
            return Self(canonical_at_pi(self.0));
        }
        let axis = self.0 / theta;
        let wrapped = theta.rem_euclid(2.0 * PI);
        let v = if wrapped > PI {
            -axis * (2.0 * PI - wrapped)
        } else {
            axis * wrapped
        };
        Self(canonical_at_pi(v))
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        rotvec_to_matrix(self)
    }
}

fn canonical_at_pi(v: Vector3<f64>) -> Vector3<f64> {
    if (v.norm() - PI).abs() > 1e-12 {
        return v;
    }
    match v.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula. Total on finite input; the result is orthonormal with
/// determinant +1.
pub fn rotvec_to_matrix(r: &RotVec3) -> Matrix3<f64> {
    let theta = r.0.norm();
    let k = skew(&r.0);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`rotvec_to_matrix`], returning the canonical rotation vector.
pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> Result<RotVec3, GeometryError> {
    let deviation = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !deviation.is_finite() || deviation > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
        return Err(GeometryError::NonOrthonormalInput { deviation, det });
    }
    Ok(log_rotation(m))
}

/// Log map without the orthonormality check; callers guarantee a rotation.
pub(crate) fn log_rotation(m: &Matrix3<f64>) -> RotVec3 {
    let skew_part = vee(&(m - m.transpose())) * 0.5; // sin(θ)·n
    let sin_theta = skew_part.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        // First-order inverse of the Taylor branch; exact to O(θ³).
        return RotVec3(skew_part);
    }
    if theta < PI - 1e-3 {
        return RotVec3(skew_part * (theta / sin_theta));
    }

    // Near π the skew part vanishes; recover the axis from n·nᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let nnt = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let mut best = 0;
    for i in 1..3 {
        if nnt[(i, i)] > nnt[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = nnt.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew_part) < 0.0 {
        axis = -axis;
    }
    RotVec3(axis * theta).canonical()
}

/// A rigid transform: rotate, then translate (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub translation: Vector3<f64>,
    pub rotation: RotVec3,
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6 {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: RotVec3::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: RotVec3) -> Self {
        Self {
            translation,
            rotation: rotation.canonical(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), RotVec3::identity())
    }

    /// `[tx, ty, tz, rx, ry, rz]`
    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            RotVec3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        let t = self.translation;
        let r = self.rotation.0;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    fn from_parts(rot: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            translation,
            rotation: log_rotation(rot),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self::from_parts(&rt, -(rt * self.translation))
    }

    /// Group composition `self ∘ other`: `other` is interpreted in `self`'s frame.
    pub fn compose(&self, other: &Pose6) -> Self {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        Self::from_parts(&(ra * rb), self.translation + ra * other.translation)
    }

    /// Distance used by tests and tolerances: max of translation error norm
    /// and relative rotation angle.
    pub fn distance(&self, other: &Pose6) -> f64 {
        let rel = self.inverse().compose(other);
        rel.translation.norm().max(rel.rotation.angle())
    }
}

pub fn pose_compose(a: &Pose6, b: &Pose6) -> Pose6 {
    a.compose(b)
}

pub fn pose_inverse(p: &Pose6) -> Pose6 {
    p.inverse()
}

/// `inverse(reference) ∘ target`: the target expressed in the reference frame.
pub fn pose_relative(reference: &Pose6, target: &Pose6) -> Pose6 {
    let rt = reference.rotation_matrix().transpose();
    let rot = rt * target.rotation_matrix();
    Pose6::from_parts(&rot, rt * (target.translation - reference.translation))
}

/// Fits the hand "end-effector" frame from palm, middle-base and ring-base
/// keypoints.
///
/// Origin at the palm. The z-axis is `normalize((ring − palm) × (middle − palm))`,
/// the x-axis points from the palm to the midpoint of middle and ring (made
/// orthogonal to z), and `y = z × x`.
pub fn fit_hand_frame(
    palm: &Vector3<f64>,
    middle: &Vector3<f64>,
    ring: &Vector3<f64>,
) -> Result<Pose6, GeometryError> {
    let u = middle - palm;
    let v = ring - palm;
    let normal = v.cross(&u);
    let area = 0.5 * normal.norm();
    if !(area > MIN_KEYPOINT_AREA) {
        return Err(GeometryError::DegenerateKeypoints { area });
    }
    let z = normal / normal.norm();
    let mid = (middle + ring) * 0.5 - palm;
    let x_raw = mid - z * mid.dot(&z);
    let x_norm = x_raw.norm();
    if !(x_norm > 0.0) {
        return Err(GeometryError::DegenerateKeypoints { area });
    }
    let x = x_raw / x_norm;
    let y = z.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, z]);
    Ok(Pose6::from_parts(&rot, *palm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_rotvec(max_angle: f64) -> impl Strategy<Value = RotVec3> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            0.0f64..max_angle,
        )
            .prop_filter("non-zero axis", |(x, y, z, _)| x * x + y * y + z * z > 1e-4)
            .prop_map(|(x, y, z, a)| {
                let n = Vector3::new(x, y, z).normalize();
                RotVec3(n * a)
            })
    }

    fn arb_pose() -> impl Strategy<Value = Pose6> {
        (arb_rotvec(PI - 1e-6), -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0)
            .prop_map(|(r, x, y, z)| Pose6::new(Vector3::new(x, y, z), r))
    }

    #[test]
    fn zero_rotvec_is_identity() {
        assert_eq!(rotvec_to_matrix(&RotVec3::identity()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = rotvec_to_matrix(&RotVec3::new(0.0, 0.0, PI / 2.0));
        let p = m * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn identity_matrix_logs_to_zero() {
        let r = matrix_to_rotvec(&Matrix3::identity()).unwrap();
        assert_eq!(r.0, Vector3::zeros());
    }

    #[test]
    fn half_turn_has_magnitude_pi() {
        let m = rotvec_to_matrix(&RotVec3::new(0.0, 0.0, PI));
        let r = matrix_to_rotvec(&m).unwrap();
        assert!((r.angle() - PI).abs() < 1e-9);
        assert!((r.0 - Vector3::new(0.0, 0.0, PI)).norm() < 1e-9);
    }

    #[test]
    fn tiny_angle_is_stable() {
        let m = rotvec_to_matrix(&RotVec3::new(1e-9, 0.0, 0.0));
        let r = matrix_to_rotvec(&m).unwrap();
        assert!(r.0.iter().all(|c| c.is_finite()));
        assert!((r.0.x - 1e-9).abs() < 1e-18);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(
            matrix_to_rotvec(&m),
            Err(GeometryError::NonOrthonormalInput { .. })
        ));
        // A reflection is orthogonal but not a rotation.
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rotvec(&refl).is_err());
    }

    #[test]
    fn canonical_wraps_large_angles() {
        let r = RotVec3::new(0.0, 0.0, 1.5 * PI).canonical();
        assert!((r.0 - Vector3::new(0.0, 0.0, -0.5 * PI)).norm() < 1e-12);
        let r = RotVec3::new(0.0, -PI, 0.0).canonical();
        assert_eq!(r.0, Vector3::new(0.0, PI, 0.0));
    }

    #[test]
    fn compose_basics() {
        let p = Pose6::new(Vector3::new(0.3, -0.2, 1.0), RotVec3::new(0.1, 0.7, -0.4));
        assert!(Pose6::identity().compose(&p).distance(&p) < 1e-12);
        assert!(p.compose(&p.inverse()).distance(&Pose6::identity()) < 1e-9);
        let a = Pose6::from_translation(1.0, 2.0, 3.0);
        let b = Pose6::from_translation(-0.5, 0.25, 4.0);
        let c = a.compose(&b);
        assert_eq!(c.translation, Vector3::new(0.5, 2.25, 7.0));
        assert_eq!(c.rotation, RotVec3::identity());
    }

    #[test]
    fn relative_basics() {
        let p = Pose6::new(Vector3::new(0.3, -0.2, 1.0), RotVec3::new(0.1, 0.7, -0.4));
        assert!(pose_relative(&p, &p).distance(&Pose6::identity()) < 1e-12);
        let rel = pose_relative(&Pose6::identity(), &p);
        assert!(rel.distance(&p) < 1e-12);
    }

    #[test]
    fn canonical_hand_layout() {
        let f = fit_hand_frame(
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.1, 0.0),
            &Vector3::new(1.0, -0.1, 0.0),
        )
        .unwrap();
        assert_eq!(f.translation, Vector3::zeros());
        let m = f.rotation_matrix();
        assert!((m.column(0) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((m.column(2) - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(f.rotation.angle() < 1e-12);
    }

    #[test]
    fn collinear_keypoints_rejected() {
        let err = fit_hand_frame(
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(2.0, 0.0, 0.0),
        );
        assert!(matches!(err, Err(GeometryError::DegenerateKeypoints { .. })));
        let z = Vector3::zeros();
        assert!(fit_hand_frame(&z, &z, &z).is_err());
    }

    proptest! {
        #[test]
        fn rotvec_round_trip(r in arb_rotvec(PI - 1e-6)) {
            let back = matrix_to_rotvec(&rotvec_to_matrix(&r)).unwrap();
            prop_assert!((back.0 - r.canonical().0).norm() < 1e-9);
        }

        #[test]
        fn matrix_fixed_point(r in arb_rotvec(PI - 1e-6)) {
            let m = rotvec_to_matrix(&r);
            let m2 = rotvec_to_matrix(&matrix_to_rotvec(&m).unwrap());
            prop_assert!((m - m2).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.distance(&right) < 1e-9);
        }

        #[test]
        fn double_inverse(p in arb_pose()) {
            prop_assert!(p.inverse().inverse().distance(&p) < 1e-9);
        }

        #[test]
        fn relative_round_trip(a in arb_pose(), b in arb_pose()) {
            let rel = pose_relative(&a, &b);
            prop_assert!(a.compose(&rel).distance(&b) < 1e-9);
        }

        #[test]
        fn hand_frame_equivariance(t in arb_pose(), dx in -0.05f64..0.05, dy in 0.01f64..0.05) {
            let palm = Vector3::new(0.1, 0.2, 0.3);
            let middle = palm + Vector3::new(0.08, dy, dx);
            let ring = palm + Vector3::new(0.08, -dy, -dx);
            let base = fit_hand_frame(&palm, &middle, &ring).unwrap();
            let moved = fit_hand_frame(
                &t.transform_point(&palm),
                &t.transform_point(&middle),
                &t.transform_point(&ring),
            ).unwrap();
            prop_assert!(moved.distance(&t.compose(&base)) < 1e-9);
        }
    }
}
