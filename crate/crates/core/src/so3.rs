//! Rotation-group primitives: distances, proper SVD, projection onto SO(3)
//! and Haar sampling.
//!
//! Every function here is pure; randomness comes in through an explicit
//! generator owned by the caller.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;

/// A 3×3 proper orthogonal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `mᵀm = I` and `det(m) = 1` to within [`ROTATION_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotARotation { ortho, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix already known to be in SO(3) (results of exact
    /// constructions such as `U·Vᵀ` with proper factors).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("axis must be non-zero and finite".into()));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n * s;
        rotation_from_quaternion([c, a.x, a.y, a.z])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Row-major flattening used by every on-disk format.
    pub fn to_row_major(&self) -> [f64; 9] {
        row_major(&self.0)
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Rotation::new(from_row_major(v))
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Rotation::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

pub fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

pub fn from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

/// Normalized geodesic distance in `[0, 1]`: the rotation angle of `r1ᵀ r2`
/// divided by π.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    // ‖r1 − r2‖_F = 2√2·sin(θ/2), exactly zero for equal inputs. Past π/2
    // use atan2(sin θ, cos θ) from the skew and trace parts of r1ᵀr2.
    let half_sin = ((r1.0 - r2.0).norm() / (2.0 * std::f64::consts::SQRT_2)).min(1.0);
    let theta = if half_sin < std::f64::consts::FRAC_1_SQRT_2 {
        2.0 * half_sin.asin()
    } else {
        let m = r1.0.transpose() * r2.0;
        let axial = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (axial.norm() / 2.0).atan2((m.trace() - 1.0) / 2.0)
    };
    theta / std::f64::consts::PI
}

/// Angular error in degrees, `[0, 180]`.
pub fn angle_error_deg(r1: &Rotation, r2: &Rotation) -> f64 {
    geodesic_distance(r1, r2) * 180.0
}

/// SVD with both orthogonal factors in SO(3). Reflections are absorbed
/// into the smallest singular value, which may therefore be negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProperSvd {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl ProperSvd {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s) * self.v.transpose()
    }
}

pub fn proper_svd(m: &Matrix3<f64>) -> Result<ProperSvd> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to proper_svd"));
    }
    let svd = m.svd(true, true);
    let u_raw = svd.u.expect("requested U");
    let vt_raw = svd.v_t.expect("requested Vᵀ");
    let sv = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut u = Matrix3::zeros();
    let mut v = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &vt_raw.row(src).transpose());
        s[dst] = sv[src];
    }

    // Flip the column paired with the smallest singular value.
    if u.determinant() < 0.0 {
        u.set_column(2, &(-u.column(2)));
        s[2] = -s[2];
    }
    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
        s[2] = -s[2];
    }
    Ok(ProperSvd { u, s, v })
}

/// Result of projecting a matrix onto SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub rotation: Rotation,
    /// Set when the maximizer of `tr(mᵀR)` is not unique.
    pub degenerate: bool,
}

/// Relative tolerance used to decide that the two smallest proper singular
/// values cancel (non-unique projection).
const DEGENERACY_TOL: f64 = 1e-12;

/// Closest rotation to `m` in the sense of maximizing `tr(mᵀR)`, i.e. `U·Vᵀ`
/// from the proper SVD. The zero matrix maps to the identity, flagged as
/// degenerate.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Projection> {
    let svd = proper_svd(m)?;
    let scale = svd.s[0].abs();
    if scale == 0.0 {
        return Ok(Projection {
            rotation: Rotation::identity(),
            degenerate: true,
        });
    }
    // s₂ ≥ |s₃|, so s₂ + s₃ = 0 exactly when the maximizer is a circle.
    let degenerate = svd.s[1] + svd.s[2] <= DEGENERACY_TOL * scale;
    Ok(Projection {
        rotation: Rotation::from_matrix_unchecked(svd.u * svd.v.transpose()),
        degenerate,
    })
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix. The input is
/// normalized first, so `q` and `-q` give bit-identical matrices.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Result<Rotation> {
    let q = Vector4::from(q);
    let n = q.norm();
    if !n.is_finite() {
        return Err(Error::NonFinite("quaternion"));
    }
    if n == 0.0 {
        return Err(Error::InvalidArgument("zero quaternion".into()));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Ok(Rotation(m))
}

/// Haar-uniform rotation from a Gaussian-normalized quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-12 {
            return rotation_from_quaternion(q).expect("non-zero quaternion");
        }
    }
}

/// CDF of the rotation angle of a Haar-uniform rotation:
/// `P(θ ≤ t) = (t − sin t)/π` for `t ∈ [0, π]`.
pub fn haar_angle_cdf(theta: f64) -> f64 {
    let t = theta.clamp(0.0, std::f64::consts::PI);
    (t - t.sin()) / std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn geodesic_trivial_values() {
        let i = Rotation::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        let rz_pi = Rotation::new(Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))).unwrap();
        assert!((geodesic_distance(&i, &rz_pi) - 1.0).abs() < 1e-12);
        assert!((geodesic_distance(&i, &Rotation::about_z(PI / 2.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn angle_error_trivial_values() {
        let i = Rotation::identity();
        assert_eq!(angle_error_deg(&i, &i), 0.0);
        let rz_pi = Rotation::new(Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))).unwrap();
        assert!((angle_error_deg(&i, &rz_pi) - 180.0).abs() < 1e-9);
        assert!((angle_error_deg(&i, &Rotation::about_x(PI / 2.0)) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn clamping_absorbs_roundoff() {
        let r = random_rotation(&mut rng(3));
        let d = geodesic_distance(&r, &r);
        assert!(d.is_finite() && d < 1e-7);
    }

    #[test]
    fn rejects_non_rotations() {
        assert!(Rotation::new(Matrix3::identity() * 2.0).is_err());
        assert!(Rotation::new(-Matrix3::<f64>::identity()).is_err());
        let mut m = Matrix3::identity();
        m[(0, 0)] = f64::NAN;
        assert!(Rotation::new(m).is_err());
    }

    #[test]
    fn metric_properties_on_random_triples() {
        let mut g = rng(11);
        for _ in 0..1000 {
            let a = random_rotation(&mut g);
            let b = random_rotation(&mut g);
            let c = random_rotation(&mut g);
            let ab = geodesic_distance(&a, &b);
            assert!((ab - geodesic_distance(&b, &a)).abs() < 1e-9);
            assert!(geodesic_distance(&a, &a) < 1e-7);
            assert!(ab <= geodesic_distance(&a, &c) + geodesic_distance(&c, &b) + 1e-9);
            let h = random_rotation(&mut g);
            let moved = geodesic_distance(&h.compose(&a), &h.compose(&b));
            assert!((moved - ab).abs() < 1e-7, "{moved} vs {ab}");
        }
    }

    #[test]
    fn proper_svd_examples() {
        let svd = proper_svd(&Matrix3::identity()).unwrap();
        assert!((svd.reconstruct() - Matrix3::identity()).norm() < 1e-12);
        assert!((svd.s - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-12);

        let m = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, -3.0));
        let svd = proper_svd(&m).unwrap();
        assert!((svd.s - Vector3::new(3.0, 2.0, -1.0)).norm() < 1e-12, "{:?}", svd.s);
        assert!((svd.u.determinant() - 1.0).abs() < 1e-9);
        assert!((svd.v.determinant() - 1.0).abs() < 1e-9);
        assert!((svd.reconstruct() - m).norm() < 1e-8);

        let svd = proper_svd(&Matrix3::zeros()).unwrap();
        assert_eq!(svd.s, Vector3::zeros());
    }

    #[test]
    fn proper_svd_rejects_nan() {
        let mut m = Matrix3::identity();
        m[(1, 2)] = f64::NAN;
        assert!(matches!(proper_svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn proper_svd_random_reconstruction() {
        let mut g = rng(5);
        for _ in 0..1000 {
            let m = Matrix3::from_fn(|_, _| g.sample::<f64, _>(StandardNormal) * 3.0);
            let svd = proper_svd(&m).unwrap();
            assert!((svd.reconstruct() - m).norm() < 1e-8);
            assert!((svd.u.determinant() - 1.0).abs() < 1e-9);
            assert!((svd.v.determinant() - 1.0).abs() < 1e-9);
            assert!(svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2] && svd.s[1] >= 0.0);
        }
    }

    #[test]
    fn projection_examples() {
        let mut g = rng(9);
        let r = random_rotation(&mut g);
        let p = project_to_so3(r.matrix()).unwrap();
        assert!((p.rotation.matrix() - r.matrix()).norm() < 1e-9);
        assert!(!p.degenerate);

        let p = project_to_so3(&(Matrix3::identity() * 5.0)).unwrap();
        assert!((p.rotation.matrix() - Matrix3::identity()).norm() < 1e-12);

        let p = project_to_so3(&Matrix3::zeros()).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.rotation, Rotation::identity());

        // diag(1, 1, -1): the two smallest proper singular values cancel.
        let p = project_to_so3(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))).unwrap();
        assert!(p.degenerate);
        Rotation::new(*p.rotation.matrix()).unwrap();
    }

    #[test]
    fn projection_scale_invariant() {
        let mut g = rng(21);
        for _ in 0..100 {
            let m = Matrix3::from_fn(|_, _| g.sample::<f64, _>(StandardNormal));
            let s = g.random_range(0.01..100.0);
            let a = project_to_so3(&m).unwrap().rotation;
            let b = project_to_so3(&(m * s)).unwrap().rotation;
            assert!((a.matrix() - b.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(rotation_from_quaternion([1.0, 0.0, 0.0, 0.0]).unwrap(), Rotation::identity());
        let r = rotation_from_quaternion([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(*r.matrix(), Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
        let q = [0.3, -1.2, 0.7, 2.1];
        let nq = q.map(|v: f64| -v);
        assert_eq!(
            rotation_from_quaternion(q).unwrap().to_row_major(),
            rotation_from_quaternion(nq).unwrap().to_row_major()
        );
        assert!(rotation_from_quaternion([0.0; 4]).is_err());
    }

    #[test]
    fn random_rotation_is_seeded_and_valid() {
        let a = random_rotation(&mut rng(42));
        let b = random_rotation(&mut rng(42));
        assert_eq!(a, b);
        Rotation::new(*a.matrix()).unwrap();
    }

    #[test]
    fn row_major_round_trip() {
        let r = random_rotation(&mut rng(1));
        let back = Rotation::from_row_major(&r.to_row_major()).unwrap();
        assert_eq!(r, back);
        let json = serde_json::to_string(&r).unwrap();
        let parsed: Rotation = serde_json::from_str(&json).unwrap();
        assert_eq!(r, parsed);
    }
}
