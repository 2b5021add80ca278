//! Rotation-group primitives: hat/vee, exponential and logarithmic maps,
//! the trace-form geodesic term, Gram-Schmidt projection and the 6D
//! continuous rotation representation.
//!
//! Everything here is pure `f64` arithmetic on `nalgebra` fixed-size types.
//! The differentiable counterparts used during training live in
//! [`crate::autodiff`] (`so3_exp`, `gram_schmidt`) and are checked against
//! these reference functions.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Within this distance of pi the log map extracts the axis from the diagonal.
pub const NEAR_PI: f64 = 1e-3;
/// Normalisation floor for Gram-Schmidt.
pub const DEGENERATE_NORM: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;
const LOG_INPUT_TOL: f64 = 1e-6;
const SKEW_TOL: f64 = 1e-9;

/// A 3x3 orthonormal matrix with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

/// First two columns of a rotation matrix, stacked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against the rotation invariants at 1e-9.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let (orth, det) = rotation_defect(&m);
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotRotation { orth, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller knows is a rotation (e.g. a product of rotations).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_row_slice(rows: &[f64]) -> Result<Self> {
        Rotation::new(Matrix3::from_row_slice(rows))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Row-major entries.
    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn compose(&self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation about the world z axis.
    pub fn yaw(angle: f64) -> Self {
        exp_map(&Vector3::new(0.0, 0.0, angle))
    }

    /// Orthogonality error (Frobenius norm of `RᵀR − I`) and determinant.
    pub fn defect(&self) -> (f64, f64) {
        rotation_defect(&self.0)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

fn rotation_defect(m: &Matrix3<f64>) -> (f64, f64) {
    let orth = (m.transpose() * m - Matrix3::identity()).norm();
    (orth, m.determinant())
}

/// Cross-product matrix: `hat(w) * x == w.cross(x)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]; rejects matrices that are not skew-symmetric.
pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = (s + s.transpose()).norm();
    if sym > SKEW_TOL {
        return Err(Error::NotSkew(sym));
    }
    Ok(vee_unchecked(s))
}

fn vee_unchecked(s: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)])
}

/// `sin(t)/t` and `(1 - cos t)/t²`, with 2nd-order Taylor series below [`SMALL_ANGLE`].
pub fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta))
    }
}

/// Rodrigues' formula.
pub fn exp_map(w: &Vector3<f64>) -> Rotation {
    let theta = w.norm();
    let (a, b) = rodrigues_coefficients(theta);
    let k = hat(w);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm of a valid rotation; the result has norm in `[0, pi]`.
pub fn log_map(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let anti = vee_unchecked(&(m - m.transpose()));
    if theta < SMALL_ANGLE {
        return anti * 0.5;
    }
    if PI - theta < NEAR_PI {
        return near_pi_log(m, theta, &anti);
    }
    anti * (theta / (2.0 * theta.sin()))
}

/// Checked logarithm for arbitrary matrices (tolerance 1e-6).
pub fn log_matrix(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let (orth, det) = rotation_defect(m);
    if orth > LOG_INPUT_TOL || (det - 1.0).abs() > LOG_INPUT_TOL {
        return Err(Error::NotRotation { orth, det });
    }
    Ok(log_map(&Rotation(*m)))
}

// Symmetric part of R is ((1+c)/2) I + ((1-c)/2) a aᵀ; recover a from the
// largest diagonal entry, sign from the antisymmetric part.
fn near_pi_log(m: &Matrix3<f64>, theta: f64, anti: &Vector3<f64>) -> Vector3<f64> {
    let c = theta.cos();
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
    let i = (0..3)
        .max_by(|&x, &y| outer[(x, x)].total_cmp(&outer[(y, y)]))
        .unwrap_or(0);
    let ai = outer[(i, i)].max(0.0).sqrt();
    let mut axis = Vector3::new(outer[(i, 0)], outer[(i, 1)], outer[(i, 2)]) / ai;
    axis[i] = ai;
    axis /= axis.norm();
    if axis.dot(anti) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// `1 - (tr(Raᵀ Rb) - 1) / 2`, clamped to `[0, 2]`.
pub fn geodesic_term(ra: &Rotation, rb: &Rotation) -> f64 {
    let tr = (ra.0.transpose() * rb.0).trace();
    (1.0 - (tr - 1.0) * 0.5).clamp(0.0, 2.0)
}

/// Rotation angle between two orientations, in radians.
pub fn geodesic_angle(ra: &Rotation, rb: &Rotation) -> f64 {
    log_map(&ra.transpose().compose(rb)).norm()
}

fn orthonormal_pair(a1: &Vector3<f64>, a2: &Vector3<f64>) -> Result<Rotation> {
    let n1 = a1.norm();
    if n1 < DEGENERATE_NORM {
        return Err(Error::Degenerate(n1));
    }
    let c1 = a1 / n1;
    let u2 = a2 - c1 * c1.dot(a2);
    let n2 = u2.norm();
    if n2 < DEGENERATE_NORM {
        return Err(Error::Degenerate(n2));
    }
    let c2 = u2 / n2;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Projects a near-rotation onto SO(3) by Gram-Schmidt on the first two
/// columns; the third column is their cross product.
pub fn gram_schmidt_project(m: &Matrix3<f64>) -> Result<Rotation> {
    orthonormal_pair(&m.column(0).into_owned(), &m.column(1).into_owned())
}

pub fn to_6d(r: &Rotation) -> Rotation6D {
    let m = &r.0;
    Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

pub fn from_6d(r6: &Rotation6D) -> Result<Rotation> {
    let v = &r6.0;
    orthonormal_pair(
        &Vector3::new(v[0], v[1], v[2]),
        &Vector3::new(v[3], v[4], v[5]),
    )
}

/// Uniformly distributed rotation (normalised Gaussian quaternion).
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let [w, x, y, z] = q.map(|c| c / n);
        return Rotation(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ));
    }
}

/// Random unit vector.
pub fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(a: f64) -> Rotation {
        let (s, c) = a.sin_cos();
        Rotation::new(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn hat_of_zero_and_unit_z() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(hat(&Vector3::z()), expected);
    }

    #[test]
    fn hat_is_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let w = sample_unit(&mut rng) * rng.random_range(0.0..4.0);
            let x = sample_unit(&mut rng);
            let s = hat(&w);
            assert!((s + s.transpose()).norm() == 0.0);
            assert!((s * x - w.cross(&x)).norm() < 1e-15);
            assert_eq!(vee(&s).unwrap(), w);
        }
    }

    #[test]
    fn vee_examples() {
        assert_eq!(vee(&Matrix3::zeros()).unwrap(), Vector3::zeros());
        let s = Matrix3::new(0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(vee(&s).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let sym = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(vee(&sym), Err(Error::NotSkew(_))));
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*exp_map(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = exp_map(&Vector3::new(0.0, 0.0, PI / 2.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expected).norm() < 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_map(&Rotation::identity()), Vector3::zeros());
        let w = log_map(&rot_z(PI / 2.0));
        assert!((w - Vector3::new(0.0, 0.0, PI / 2.0)).norm() < 1e-15);
    }

    #[test]
    fn log_near_pi_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let w = sample_unit(&mut rng) * (PI - 1e-4);
            let r = exp_map(&w);
            let back = exp_map(&log_map(&r));
            assert!((back.matrix() - r.matrix()).norm() < 1e-6);
            assert!((log_map(&r) - w).norm() < 1e-6);
        }
    }

    #[test]
    fn log_at_exactly_pi_is_a_valid_preimage() {
        let r = Rotation::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))).unwrap();
        let w = log_map(&r);
        assert!((w.norm() - PI).abs() < 1e-12);
        assert!((exp_map(&w).matrix() - r.matrix()).norm() < 1e-12);
    }

    #[test]
    fn log_matrix_rejects_non_rotations() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.1));
        assert!(matches!(log_matrix(&m), Err(Error::NotRotation { .. })));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(log_matrix(&reflection).is_err());
    }

    #[test]
    fn rotation_new_validates() {
        assert!(Rotation::new(Matrix3::identity() * 2.0).is_err());
        assert!(Rotation::new(Matrix3::identity()).is_ok());
    }

    #[test]
    fn geodesic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ra = sample_rotation(&mut rng);
            let axis = sample_unit(&mut rng);
            assert!(geodesic_term(&ra, &ra) < 1e-15);
            let flip = ra.compose(&exp_map(&(axis * PI)));
            assert!((geodesic_term(&ra, &flip) - 2.0).abs() < 1e-12);
            let quarter = ra.compose(&exp_map(&(axis * PI / 2.0)));
            assert!((geodesic_term(&ra, &quarter) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0));
        assert_eq!(*gram_schmidt_project(&d).unwrap().matrix(), Matrix3::identity());
        for _ in 0..100 {
            let r = sample_rotation(&mut rng);
            let p = gram_schmidt_project(r.matrix()).unwrap();
            assert!((p.matrix() - r.matrix()).norm() < 1e-12);

            let noise = Matrix3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
            let q = gram_schmidt_project(&(r.matrix() + noise)).unwrap();
            let (orth, det) = q.defect();
            assert!(orth < 1e-14 && (det - 1.0).abs() < 1e-14);
            assert!(geodesic_angle(&q, &r) < 2e-3 * 3.0_f64.sqrt());
            assert!(geodesic_term(&q, &r) < 2e-3);
        }
        let degenerate = Matrix3::new(1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(gram_schmidt_project(&degenerate), Err(Error::Degenerate(_))));
        assert!(matches!(gram_schmidt_project(&Matrix3::zeros()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn six_d_examples() {
        let r6 = to_6d(&Rotation::identity());
        assert_eq!(r6.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(from_6d(&r6).unwrap(), Rotation::identity());
        let skewed = Rotation6D([1.0, 0.2, -0.3, 0.5, 1.0, 0.7]);
        let r = from_6d(&skewed).unwrap();
        let (orth, det) = r.defect();
        assert!(orth < 1e-14 && (det - 1.0).abs() < 1e-14);
        assert!(from_6d(&Rotation6D([0.0; 6])).is_err());
    }

    #[test]
    fn taylor_branch_is_continuous() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for eps in [1e-16, 1e-15, 1e-14] {
            let below = exp_map(&(axis * (SMALL_ANGLE - eps)));
            let above = exp_map(&(axis * (SMALL_ANGLE + eps)));
            assert!((below.matrix() - above.matrix()).abs().max() < 1e-12);
        }
        // both branch formulas evaluated at the threshold itself
        let t = SMALL_ANGLE;
        let closed = (t.sin() / t, 2.0 * (0.5 * t).sin().powi(2) / (t * t));
        let taylor = (1.0 - t * t / 6.0, 0.5 - t * t / 24.0);
        assert!((closed.0 - taylor.0).abs() < 1e-12 && (closed.1 - taylor.1).abs() < 1e-12);
        let (a_lo, b_lo) = rodrigues_coefficients(SMALL_ANGLE * (1.0 - 1e-6));
        let (a_hi, b_hi) = rodrigues_coefficients(SMALL_ANGLE * (1.0 + 1e-6));
        assert!((a_lo - a_hi).abs() < 1e-12 && (b_lo - b_hi).abs() < 1e-12);
    }
}
