//! Closed-form exponential and logarithm maps between SE(3) and se(3).
//!
//! Tangent vectors are ordered rotation first: `[ω | u]`, where `ω` is the
//! axis-angle rotation generator (radians) and `u` the translation
//! generator (millimeters). All math is carried out in `f64`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle the trigonometric coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Rotations whose angle is within this distance of π are rejected by
/// [`se3_log`].
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Orthonormality tolerance for rotation blocks.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation angle {theta} is within {NEAR_PI_MARGIN} of pi; re-parameterize the transform")]
    NearPi { theta: f64 },
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid twist: {0}")]
    InvalidTwist(String),
}

/// A tangent vector of SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub u: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, u: Vector3<f64>) -> Self {
        Self { omega, u }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Validating constructor: finite components on the canonical branch
    /// `‖ω‖ ≤ π`.
    pub fn try_new(omega: Vector3<f64>, u: Vector3<f64>) -> Result<Self, LieError> {
        let twist = Self { omega, u };
        if !twist.is_finite() {
            return Err(LieError::InvalidTwist("non-finite component".into()));
        }
        if twist.angle() > std::f64::consts::PI {
            return Err(LieError::InvalidTwist(format!(
                "rotation angle {} exceeds pi",
                twist.angle()
            )));
        }
        Ok(twist)
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(v[0], v[1], v[2]),
            u: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.u.x,
            self.u.y,
            self.u.z,
        ]
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.to_array())
    }

    /// Rotation angle θ = ‖ω‖.
    pub fn angle(&self) -> f64 {
        self.omega.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.u.iter()).all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            u: self.u * s,
        }
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        self.scale(-1.0)
    }
}

/// An element of SE(3), stored as its rotation and translation blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with unit determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, LieError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(LieError::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from a homogeneous 4×4 matrix; the bottom row must
    /// be exactly `(0, 0, 0, 1)`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, LieError> {
        let bottom = m.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(LieError::InvalidTransform(
                "bottom row is not (0, 0, 0, 1)".into(),
            ));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle of the rotation block, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.matrix();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| m[(r, c)].to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), LieError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(LieError::InvalidTransform("non-finite rotation".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(LieError::InvalidTransform(format!(
            "rotation is not orthonormal (max |RᵀR − I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(LieError::InvalidTransform(format!(
            "rotation determinant is {det}, expected 1"
        )));
    }
    Ok(())
}

/// Angle of a rotation matrix, robust near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * axis.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// A stack of K twists, one per rigid structure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TwistMatrix {
    rows: Vec<Twist>,
}

impl TwistMatrix {
    pub fn new(rows: Vec<Twist>) -> Self {
        Self { rows }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            rows: vec![Twist::zero(); k],
        }
    }

    pub fn from_arrays(rows: &[[f64; 6]]) -> Self {
        Self {
            rows: rows.iter().map(|r| Twist::from_array(*r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Twist] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Twist] {
        &mut self.rows
    }

    pub fn to_arrays(&self) -> Vec<[f64; 6]> {
        self.rows.iter().map(Twist::to_array).collect()
    }

    /// Flattened row-major parameters (6K values).
    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|t| t.to_array()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        assert!(values.len().is_multiple_of(6), "flat twist length must be a multiple of 6");
        Self {
            rows: values
                .chunks_exact(6)
                .map(|c| Twist::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
                .collect(),
        }
    }

    /// Checks every row against the [`Twist`] invariants.
    pub fn validate(&self) -> Result<(), LieError> {
        for t in &self.rows {
            Twist::try_new(t.omega, t.u)?;
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for TwistMatrix {
    type Output = Twist;
    fn index(&self, i: usize) -> &Twist {
        &self.rows[i]
    }
}

impl std::ops::IndexMut<usize> for TwistMatrix {
    fn index_mut(&mut self, i: usize) -> &mut Twist {
        &mut self.rows[i]
    }
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v × w`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The three coefficients `sinθ/θ`, `(1−cosθ)/θ²` and `(θ−sinθ)/θ³` as
/// functions of θ².
#[inline]
fn exp_coefficients(theta_sq: f64) -> (f64, f64, f64) {
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (
            s / theta,
            2.0 * half * half / theta_sq,
            (theta - s) / (theta_sq * theta),
        )
    }
}

/// SO(3) exponential and its left Jacobian, which is also the Ω block that
/// maps `u` to the translation.
#[inline]
fn rotation_and_jacobian(omega: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let (a, b, c) = exp_coefficients(omega.norm_squared());
    let w = skew(omega);
    let w2 = w * w;
    let i = Matrix3::identity();
    (i + w * a + w2 * b, i + w * b + w2 * c)
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp(v: &Twist) -> RigidTransform {
    let (rotation, omega_mat) = rotation_and_jacobian(&v.omega);
    RigidTransform {
        rotation,
        translation: omega_mat * v.u,
    }
}

/// Logarithm map SE(3) → se(3) on the canonical branch.
pub fn se3_log(t: &RigidTransform) -> Result<Twist, LieError> {
    check_rotation(&t.rotation)?;
    let r = &t.rotation;
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * axis.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::NearPi { theta });
    }
    let theta_sq = theta * theta;
    // ω = θ / (2 sinθ) · axis
    let factor = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta_sq / 6.0)
    } else {
        0.5 * theta / theta.sin()
    };
    let omega = axis * factor;

    // Ω⁻¹ = I − ½[ω]× + D [ω]×², D = (1 − (θ/2)cot(θ/2)) / θ²
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta_sq
    };
    let w = skew(&omega);
    let omega_inv = Matrix3::identity() - w * 0.5 + w * w * d;
    Ok(Twist {
        omega,
        u: omega_inv * t.translation,
    })
}

/// Row-wise exponential of a stack of twists.
pub fn batched_exp(twists: &[Twist]) -> Vec<RigidTransform> {
    let mut out = vec![RigidTransform::identity(); twists.len()];
    batched_exp_into(twists, &mut out);
    out
}

/// [`batched_exp`] writing into a caller-owned buffer.
pub fn batched_exp_into(twists: &[Twist], out: &mut [RigidTransform]) {
    assert_eq!(twists.len(), out.len(), "output length must match input");
    for (v, t) in twists.iter().zip(out.iter_mut()) {
        *t = se3_exp(v);
    }
}

/// Left Jacobian of SE(3), ordered `[ω | u]`.
///
/// For a small perturbation δ, `exp(v + δ) ≈ exp(J δ) · exp(v)`. The block
/// layout is `[[J_so3, 0], [Q, J_so3]]`.
pub fn se3_left_jacobian(v: &Twist) -> Matrix6<f64> {
    let (_, j) = rotation_and_jacobian(&v.omega);
    let q = translation_jacobian_block(v);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// The coupling block Q of the SE(3) left Jacobian.
fn translation_jacobian_block(v: &Twist) -> Matrix3<f64> {
    let theta_sq = v.omega.norm_squared();
    let (c1, c2, c3) = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 / 6.0 - theta_sq / 120.0,
            1.0 / 24.0 - theta_sq / 720.0,
            1.0 / 120.0 - theta_sq / 2520.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let (s, c) = theta.sin_cos();
        let t4 = theta_sq * theta_sq;
        (
            (theta - s) / (theta_sq * theta),
            (theta_sq + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let p = skew(&v.omega);
    let r = skew(&v.u);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Derivative of `exp(v) · x` with respect to the twist `v`, evaluated from
/// the already-transformed point `y = exp(v) · x`. Columns follow `[ω | u]`.
pub fn point_jacobian(v: &Twist, y: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let (_, j) = rotation_and_jacobian(&v.omega);
    let q = translation_jacobian_block(v);
    let mut out = nalgebra::Matrix3x6::zeros();
    let rot_cols = q - skew(y) * j;
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_cols);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&j);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Truncated power series of the 4×4 generator; independent of the
    /// closed forms.
    fn series_exp(v: &Twist) -> Matrix4<f64> {
        let mut g = Matrix4::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&v.omega));
        g.fixed_view_mut::<3, 1>(0, 3).copy_from(&v.u);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..60 {
            term = term * g / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(
            skew(&Vector3::new(1.0, 0.0, 0.0)),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        let v = Vector3::new(0.3, -1.2, 2.5);
        let w = Vector3::new(-0.7, 0.1, 0.4);
        assert_abs_diff_eq!(skew(&v) * v, Vector3::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(skew(&v) * w, v.cross(&w), epsilon = 1e-15);
        assert_eq!(skew(&v).transpose(), -skew(&v));
    }

    #[test]
    fn pure_translation_is_exact() {
        let t = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert_eq!(*t.rotation(), Matrix3::identity());
        assert_eq!(*t.translation(), Vector3::new(1.0, 2.0, 3.0));
        let v = se3_log(&t).unwrap();
        assert_eq!(v.omega, Vector3::zeros());
        assert_abs_diff_eq!(v.u, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_x_matches_series() {
        let v = Twist::new(Vector3::new(FRAC_PI_2, 0.0, 0.0), Vector3::zeros());
        let t = se3_exp(&v);
        assert_abs_diff_eq!(t.matrix(), series_exp(&v), epsilon = 1e-9);
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_abs_diff_eq!(*t.rotation(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(*t.translation(), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn screw_translation_matches_integrated_motion() {
        // Integrate dx/ds = ω × x + u from s = 0 to 1 starting at the origin
        // with RK4; the endpoint is the translation block of exp.
        let v = Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let f = |x: Vector3<f64>| v.omega.cross(&x) + v.u;
        let steps = 20_000;
        let h = 1.0 / steps as f64;
        let mut x = Vector3::zeros();
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f(x + k1 * (h / 2.0));
            let k3 = f(x + k2 * (h / 2.0));
            let k4 = f(x + k3 * h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let t = se3_exp(&v);
        assert_abs_diff_eq!(*t.translation(), x, epsilon = 1e-9);
        // Ω u in closed form: (2/π, 2/π, 0).
        let c = 2.0 / std::f64::consts::PI;
        assert_abs_diff_eq!(*t.translation(), Vector3::new(c, c, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn identity_logs_to_zero() {
        let v = se3_log(&RigidTransform::identity()).unwrap();
        assert_eq!(v, Twist::zero());
    }

    #[test]
    fn near_pi_is_rejected() {
        let t = se3_exp(&Twist::new(
            Vector3::new(0.0, std::f64::consts::PI - 1e-8, 0.0),
            Vector3::zeros(),
        ));
        assert!(matches!(se3_log(&t), Err(LieError::NearPi { .. })));
    }

    #[test]
    fn non_orthonormal_is_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(
            RigidTransform::from_matrix(&m),
            Err(LieError::InvalidTransform(_))
        ));
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1e-3;
        assert!(RigidTransform::from_matrix(&m).is_err());
    }

    #[test]
    fn small_angle_switch_is_continuous() {
        let axis = Vector3::new(0.48, -0.6, 0.64).normalize();
        let u = Vector3::new(3.0, -1.0, 2.0);
        for eps in [1e-16, 1e-15, 1e-14] {
            let lo = se3_exp(&Twist::new(axis * (SMALL_ANGLE - eps), u));
            let hi = se3_exp(&Twist::new(axis * (SMALL_ANGLE + eps), u));
            assert_abs_diff_eq!(lo.matrix(), hi.matrix(), epsilon = 1e-12);
            let vlo = se3_log(&lo).unwrap();
            let vhi = se3_log(&hi).unwrap();
            assert_abs_diff_eq!(vlo.to_vector(), vhi.to_vector(), epsilon = 1e-12);
        }
    }

    #[test]
    fn batched_matches_scalar_bitwise() {
        assert!(batched_exp(&vec![Twist::zero(); 5])
            .iter()
            .all(|t| *t == RigidTransform::identity()));
        let twists: Vec<Twist> = (0..50)
            .map(|i| {
                let s = i as f64 * 0.05;
                Twist::new(Vector3::new(s, -0.3 * s, 0.1), Vector3::new(1.0, s, -s))
            })
            .collect();
        let batched = batched_exp(&twists);
        for (v, t) in twists.iter().zip(&batched) {
            assert_eq!(*t, se3_exp(v));
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let v = Twist::new(Vector3::new(0.4, -0.2, 0.9), Vector3::new(12.0, -4.0, 7.5));
        let j = se3_left_jacobian(&v);
        let base = se3_exp(&v);
        let h = 1e-6;
        for c in 0..6 {
            let mut p = v.to_array();
            let mut m = v.to_array();
            p[c] += h;
            m[c] -= h;
            // exp(v + δ) exp(v)⁻¹ ≈ exp(J δ)
            let dp = se3_log(&(se3_exp(&Twist::from_array(p)) * base.inverse())).unwrap();
            let dm = se3_log(&(se3_exp(&Twist::from_array(m)) * base.inverse())).unwrap();
            let col = (dp.to_vector() - dm.to_vector()) / (2.0 * h);
            assert_abs_diff_eq!(col, j.column(c).into_owned(), epsilon = 1e-7);
        }
    }

    #[test]
    fn point_jacobian_matches_finite_differences() {
        for (omega, u) in [
            (Vector3::new(0.3, 0.1, -0.5), Vector3::new(5.0, 1.0, -2.0)),
            (Vector3::new(1e-6, -2e-6, 0.0), Vector3::new(-3.0, 0.5, 8.0)),
        ] {
            let v = Twist::new(omega, u);
            let x = Vector3::new(40.0, -25.0, 12.0);
            let y = se3_exp(&v).transform_point(&x);
            let jac = point_jacobian(&v, &y);
            let h = 1e-6;
            for c in 0..6 {
                let mut p = v.to_array();
                let mut m = v.to_array();
                p[c] += h;
                m[c] -= h;
                let yp = se3_exp(&Twist::from_array(p)).transform_point(&x);
                let ym = se3_exp(&Twist::from_array(m)).transform_point(&x);
                let col = (yp - ym) / (2.0 * h);
                assert_abs_diff_eq!(col, jac.column(c).into_owned(), epsilon = 1e-6);
            }
        }
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            1e-3f64..max_angle,
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_filter_map("degenerate axis", |(a, theta, u)| {
                let axis = Vector3::from(a);
                (axis.norm() > 1e-3)
                    .then(|| Twist::new(axis.normalize() * theta, Vector3::from(u)))
            })
    }

    proptest! {
        #[test]
        fn log_inverts_exp(v in twist_strategy(std::f64::consts::PI - 0.1)) {
            let back = se3_log(&se3_exp(&v)).unwrap();
            prop_assert!((back.to_vector() - v.to_vector()).amax() < 1e-9);
        }

        #[test]
        fn exp_of_negation_is_inverse(v in twist_strategy(std::f64::consts::PI)) {
            let prod = se3_exp(&v) * se3_exp(&-v);
            prop_assert!((prod.matrix() - Matrix4::identity()).amax() < 1e-9);
            prop_assert!((se3_exp(&v).rotation().determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn exp_inverts_log(v in twist_strategy(std::f64::consts::PI - 1e-3)) {
            let t = se3_exp(&v);
            let round = se3_exp(&se3_log(&t).unwrap());
            prop_assert!((round.matrix() - t.matrix()).amax() < 1e-9);
        }
    }
}
