//! Matrix Fisher distribution on SO(3).
//!
//! Density `p(R | F) = exp(tr(Fᵀ R)) / c(F)` with respect to the normalized
//! Haar measure, so `c(0) = 1` and the uniform distribution has entropy 0.
//!
//! `c(F)` depends only on the proper singular values `s` of `F` and is
//! evaluated as
//!
//! ```text
//! c(s) = ∫_{-1}^{1} ½ I0(½(s₁−s₂)(1−u)) · I0(½(s₁+s₂)(1+u)) · exp(s₃u) du
//! ```
//!
//! by Gauss–Legendre quadrature on exponentially scaled Bessel functions.
//! The overall factor `exp(s₁+s₂+s₃)` is pulled out so the integrand stays
//! in `[0, 1]`.

pub mod bessel;
pub mod quadrature;

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::so3::{proper_svd, project_to_so3, random_rotation, Projection, ProperSvd, Rotation};
use bessel::{i0e, i1e};
use quadrature::GaussLegendre;

/// Largest accepted Frobenius norm of a Fisher parameter.
pub const F_MAX: f64 = 60.0;

/// Quadrature order for the normalizing constant.
pub const QUADRATURE_NODES: usize = 129;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(QUADRATURE_NODES))
}

/// Unconstrained 3×3 parameter of a matrix Fisher distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherParam(Matrix3<f64>);

impl FisherParam {
    pub fn new(f: Matrix3<f64>) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Fisher parameter"));
        }
        let norm = f.norm();
        if norm > F_MAX {
            return Err(Error::FisherTooLarge { norm, max: F_MAX });
        }
        Ok(FisherParam(f))
    }

    pub fn zero() -> Self {
        FisherParam(Matrix3::zeros())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        FisherParam::new(Matrix3::from_row_slice(v))
    }
}

/// `log c`, its gradient in the proper singular values, and the SVD it was
/// computed from. Everything else in this module is derived from it.
#[derive(Debug, Clone, Copy)]
pub struct FisherStats {
    pub svd: ProperSvd,
    pub log_c: f64,
    /// `∂ log c / ∂ sᵢ`, each in `(-1, 1)`.
    pub dlog_c: Vector3<f64>,
}

impl FisherStats {
    pub fn new(p: &FisherParam) -> Self {
        let svd = proper_svd(&p.0).expect("FisherParam entries are finite");
        let (log_c, dlog_c) = log_c_and_grad(&svd.s);
        FisherStats { svd, log_c, dlog_c }
    }

    /// `E[R] = U · diag(∂ log c/∂s) · Vᵀ`.
    pub fn expected_rotation(&self) -> Matrix3<f64> {
        self.svd.u * Matrix3::from_diagonal(&self.dlog_c) * self.svd.v.transpose()
    }

    /// `log c − tr(Fᵀ E[R]) = log c − Σ sᵢ ∂ log c/∂sᵢ`.
    pub fn entropy(&self) -> f64 {
        self.log_c - self.svd.s.dot(&self.dlog_c)
    }
}

/// `log c(s)` and `∇_s log c(s)` for proper singular values `s`.
pub fn log_c_and_grad(s: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let (s1, s2, s3) = (s[0], s[1], s[2]);
    let shift = s1 + s2 + s3;
    let decay = s2 + s3;
    let gl = rule();
    let term = |i: usize| {
        let (u, w) = (gl.nodes[i], gl.weights[i]);
        let a = 0.5 * (s1 - s2) * (1.0 - u);
        let b = 0.5 * (s1 + s2) * (1.0 + u);
        // I0(a) I0(b) e^{s₃u} = i0e(a) i0e(b) e^{a+b+s₃u}, and
        // a + b + s₃u − shift = (s₂+s₃)(u−1).
        let scale = 0.5 * w * (decay * (u - 1.0)).exp();
        let (i0a, i0b) = (i0e(a), i0e(b));
        let base = scale * i0a * i0b;
        let da = scale * 0.5 * (1.0 - u) * i1e(a) * i0b;
        let db = scale * 0.5 * (1.0 + u) * i0a * i1e(b);
        [base, da + db, db - da, u * base]
    };
    // Symmetric nodes are summed in pairs so odd moments of a flat
    // integrand cancel exactly.
    let n = gl.nodes.len();
    let mut acc = [0.0; 4];
    for i in 0..n / 2 {
        let (lo, hi) = (term(i), term(n - 1 - i));
        for k in 0..4 {
            acc[k] += lo[k] + hi[k];
        }
    }
    if n % 2 == 1 {
        let mid = term(n / 2);
        for k in 0..4 {
            acc[k] += mid[k];
        }
    }
    let [c, g1, g2, g3] = acc;
    // Dividing by the rule's own weight sum makes c(0) = 1 exactly.
    let c_norm = c / (0.5 * gl.weight_sum);
    (shift + c_norm.ln(), Vector3::new(g1, g2, g3) / c)
}

/// `log ∫ exp(tr(Fᵀ R)) dR` under normalized Haar measure.
pub fn log_norm_const(p: &FisherParam) -> f64 {
    let svd = proper_svd(&p.0).expect("FisherParam entries are finite");
    log_c_and_grad(&svd.s).0
}

/// First moment `E[R] = ∇_F log c(F)`.
pub fn expected_rotation(p: &FisherParam) -> Matrix3<f64> {
    FisherStats::new(p).expected_rotation()
}

/// Negative log-likelihood `log c(F) − tr(Fᵀ r)`.
pub fn nll(p: &FisherParam, r: &Rotation) -> f64 {
    log_norm_const(p) - p.0.dot(r.matrix())
}

/// Differential entropy relative to normalized Haar; always ≤ 0.
pub fn entropy(p: &FisherParam) -> f64 {
    FisherStats::new(p).entropy()
}

/// The density maximizer `U·Vᵀ`. `F = 0` gives the identity flagged as
/// degenerate.
pub fn mode(p: &FisherParam) -> Projection {
    project_to_so3(&p.0).expect("FisherParam entries are finite")
}

/// `∂ nll / ∂F = E[R] − r`.
pub fn nll_grad_wrt_f(p: &FisherParam, r: &Rotation) -> Matrix3<f64> {
    expected_rotation(p) - r.matrix()
}

/// [`nll`] and [`nll_grad_wrt_f`] sharing one evaluation of `c`.
pub fn nll_and_grad(p: &FisherParam, r: &Rotation) -> (f64, Matrix3<f64>) {
    let stats = FisherStats::new(p);
    (
        stats.log_c - p.0.dot(r.matrix()),
        stats.expected_rotation() - r.matrix(),
    )
}

/// Brute-force Monte-Carlo estimate of `log c(F)` with a delta-method
/// standard error.
pub fn oracle_log_norm_const<R: Rng + ?Sized>(
    p: &FisherParam,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "oracle needs at least 10^4 samples, got {n_samples}"
        )));
    }
    // tr(FᵀR) ≤ s₁+s₂+s₃ for every rotation, so every weight is ≤ 1.
    let svd = proper_svd(&p.0)?;
    let shift = svd.s.sum();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let r = random_rotation(rng);
        let w = (p.0.dot(r.matrix()) - shift).exp();
        sum += w;
        sum_sq += w * w;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    let std_err = (var / n).sqrt() / mean;
    Ok((shift + mean.ln(), std_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_f(g: &mut ChaCha8Rng, scale: f64) -> FisherParam {
        FisherParam::new(Matrix3::from_fn(|_, _| g.sample::<f64, _>(StandardNormal) * scale)).unwrap()
    }

    #[test]
    fn construction_guards() {
        assert!(FisherParam::new(Matrix3::identity() * 40.0).is_err());
        assert!(FisherParam::new(Matrix3::identity() * 30.0).is_ok());
        let mut m = Matrix3::zeros();
        m[(2, 1)] = f64::INFINITY;
        assert!(FisherParam::new(m).is_err());
    }

    #[test]
    fn zero_parameter_is_uniform() {
        let z = FisherParam::zero();
        assert_eq!(log_norm_const(&z), 0.0);
        assert_eq!(expected_rotation(&z), Matrix3::zeros());
        assert_eq!(entropy(&z), 0.0);
        assert_eq!(nll(&z, &random_rotation(&mut rng(1))), 0.0);
        let m = mode(&z);
        assert!(m.degenerate);
        assert_eq!(m.rotation, Rotation::identity());
        assert_eq!(nll_grad_wrt_f(&z, &Rotation::identity()), -Matrix3::identity());
    }

    #[test]
    fn small_parameter_series() {
        // c(S) = 1 + Σsᵢ²/6 + O(s³) since E[Rᵢⱼ Rₖₗ] = δᵢₖδⱼₗ/3.
        let s = Vector3::new(2e-4, 1e-4, -0.5e-4);
        let (lc, _) = log_c_and_grad(&s);
        let want = (1.0 + s.norm_squared() / 6.0).ln();
        assert!((lc - want).abs() < 1e-12);
    }

    #[test]
    fn single_axis_closed_form() {
        // s = (0, 0, t): c = sinh(t)/t
        for t in [0.3, 2.0, 9.0] {
            let (lc, _) = log_c_and_grad(&Vector3::new(t, 0.0, 0.0));
            let want = (t.sinh() / t).ln();
            assert!((lc - want).abs() < 1e-12, "{lc} vs {want}");
        }
    }

    #[test]
    fn bi_invariance() {
        let mut g = rng(7);
        for _ in 0..50 {
            let f = random_f(&mut g, 2.0);
            let u = random_rotation(&mut g);
            let v = random_rotation(&mut g);
            let moved = FisherParam::new(u.matrix() * f.matrix() * v.matrix().transpose()).unwrap();
            assert!((log_norm_const(&f) - log_norm_const(&moved)).abs() < 1e-10);
            let svd = proper_svd(f.matrix()).unwrap();
            let diag = FisherParam::new(Matrix3::from_diagonal(&svd.s)).unwrap();
            assert!((log_norm_const(&f) - log_norm_const(&diag)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_converged() {
        let fine = GaussLegendre::new(1025);
        let mut g = rng(3);
        let mut cases: Vec<FisherParam> = (0..20).map(|_| random_f(&mut g, 8.0)).collect();
        // concentrated corners of the admissible set ‖F‖ ≤ F_MAX
        for d in [
            [59.9, 0.0, 0.0],
            [34.6, 34.6, 34.6],
            [34.6, 34.6, -34.6],
            [42.0, 42.0, 0.0],
            [42.0, -42.0, 0.0],
            [50.0, 30.0, -10.0],
            [0.0, 0.0, -59.9],
        ] {
            cases.push(FisherParam::new(Matrix3::from_diagonal(&Vector3::from(d))).unwrap());
        }
        for f in cases {
            let s = proper_svd(f.matrix()).unwrap().s;
            let shift = s.sum();
            let c = fine.integrate(|u| {
                let a = 0.5 * (s[0] - s[1]) * (1.0 - u);
                let b = 0.5 * (s[0] + s[1]) * (1.0 + u);
                0.5 * i0e(a) * i0e(b) * ((s[1] + s[2]) * (u - 1.0)).exp()
            });
            let lc = log_norm_const(&f);
            assert!((lc - (shift + c.ln())).abs() < 1e-12 * lc.abs().max(1.0));
        }
    }

    #[test]
    fn analytic_grad_matches_central_differences() {
        let mut g = rng(13);
        for _ in 0..50 {
            let f = random_f(&mut g, 4.0);
            let s = proper_svd(f.matrix()).unwrap().s;
            let (_, grad) = log_c_and_grad(&s);
            for i in 0..3 {
                let h = 1e-5;
                let mut sp = s;
                let mut sm = s;
                sp[i] += h;
                sm[i] -= h;
                let fd = (log_c_and_grad(&sp).0 - log_c_and_grad(&sm).0) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-7, "∂{i}: {fd} vs {}", grad[i]);
                assert!(grad[i].abs() < 1.0);
            }
        }
    }

    #[test]
    fn concentrated_mean_approaches_identity() {
        let f = FisherParam::new(Matrix3::identity() * 30.0).unwrap();
        let st = FisherStats::new(&f);
        assert!(st.dlog_c.iter().all(|&d| d > 0.95), "{:?}", st.dlog_c);
        let g = nll_grad_wrt_f(&f, &Rotation::identity());
        assert!(g.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn fused_nll_and_grad_agree() {
        let mut g = rng(19);
        for _ in 0..50 {
            let f = random_f(&mut g, 3.0);
            let r = random_rotation(&mut g);
            let (l, d) = nll_and_grad(&f, &r);
            assert_eq!(l, nll(&f, &r));
            assert_eq!(d, nll_grad_wrt_f(&f, &r));
        }
    }

    #[test]
    fn nll_minimized_at_mode() {
        let mut g = rng(17);
        for _ in 0..1000 {
            let f = random_f(&mut g, 3.0);
            let r = random_rotation(&mut g);
            let m = mode(&f).rotation;
            assert!(nll(&f, &r) >= nll(&f, &m) - 1e-12);
        }
        let r0 = random_rotation(&mut g);
        let f = FisherParam::new(r0.matrix() * 4.0).unwrap();
        assert!((nll(&f, &r0) - (log_norm_const(&f) - 12.0)).abs() < 1e-12);
        let m = mode(&FisherParam::new(r0.matrix() * 7.0).unwrap());
        assert!((m.rotation.matrix() - r0.matrix()).norm() < 1e-9);
    }

    #[test]
    fn entropy_nonpositive_and_decreasing_in_scale() {
        let mut g = rng(19);
        for _ in 0..100 {
            let f = random_f(&mut g, 2.0);
            if f.matrix().norm() > 0.1 {
                assert!(entropy(&f) < 0.0);
            }
        }
        for _ in 0..20 {
            let f = random_f(&mut g, 1.5);
            let f2 = FisherParam::new(f.matrix() * 2.0).unwrap();
            assert!(entropy(&f2) < entropy(&f));
        }
    }

    #[test]
    fn log_partition_is_convex() {
        let mut g = rng(23);
        for _ in 0..200 {
            let a = random_f(&mut g, 3.0);
            let b = random_f(&mut g, 3.0);
            let mid = FisherParam::new((a.matrix() + b.matrix()) / 2.0).unwrap();
            let lhs = log_norm_const(&mid);
            let rhs = (log_norm_const(&a) + log_norm_const(&b)) / 2.0;
            assert!(lhs <= rhs + 1e-8);
        }
    }

    #[test]
    fn oracle_is_seeded_and_exact_at_zero() {
        let f = FisherParam::new(Matrix3::from_diagonal(&Vector3::new(1.0, 0.5, 0.2))).unwrap();
        let a = oracle_log_norm_const(&f, 10_000, &mut rng(5)).unwrap();
        let b = oracle_log_norm_const(&f, 10_000, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let (est, se) = oracle_log_norm_const(&FisherParam::zero(), 10_000, &mut rng(5)).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(se, 0.0);
        assert!(oracle_log_norm_const(&f, 100, &mut rng(5)).is_err());
    }
}
