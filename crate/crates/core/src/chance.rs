//! Gaussian collision chance constraint between a disc-shaped robot and a
//! point obstacle.
//!
//! With robot position `p ~ N(p̂, Σx)` and obstacle position
//! `o ~ N(ô, Σo)`, the probability that the obstacle lies in the robot disc
//! of area `A = π r²` is approximated by
//!
//! ```text
//! Pr ≈ A / η · exp(-½ ‖p̂ - ô‖²_{Σc⁻¹}),   Σc = Σx + Σo,   η = sqrt(det(2π Σc))
//! ```
//!
//! and `Pr ≤ δ` becomes the Mahalanobis test `‖p̂ - ô‖²_{Σc⁻¹} ≥ κ` with
//! `κ = -2 ln(η δ / A)`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const JITTER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceParams {
    /// Risk bound on the collision probability.
    pub delta: f64,
    /// Robot disc radius, m.
    #[serde(rename = "robot_radius_m")]
    pub robot_radius: f64,
}

impl Default for ChanceParams {
    fn default() -> Self {
        Self {
            delta: 0.01,
            robot_radius: 0.2,
        }
    }
}

impl ChanceParams {
    pub fn new(delta: f64, robot_radius: f64) -> Result<Self> {
        let p = Self {
            delta,
            robot_radius,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("chance.delta", "delta must lie in (0, 1)"));
        }
        if !(self.robot_radius > 0.0 && self.robot_radius.is_finite()) {
            return Err(Error::config("chance.robot_radius_m", "radius must be positive"));
        }
        Ok(())
    }

    /// Robot disc area `π r²`.
    #[inline]
    pub fn area(&self) -> f64 {
        PI * self.robot_radius * self.robot_radius
    }
}

/// Combined robot + obstacle position covariance with its inverse and
/// normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedCov {
    pub sigma_c: Matrix2<f64>,
    pub eta_c: f64,
    inverse: Matrix2<f64>,
}

impl CombinedCov {
    pub fn new(sigma_c: Matrix2<f64>) -> Result<Self> {
        let sym = (sigma_c + sigma_c.transpose()) * 0.5;
        let mut m = sym;
        let mut det = det2(&m);
        if !(det > 0.0 && m[(0, 0)] > 0.0) {
            m = sym + Matrix2::identity() * JITTER;
            det = det2(&m);
        }
        if !(det > 0.0 && m[(0, 0)] > 0.0 && det.is_finite()) {
            return Err(Error::Numerical(format!(
                "combined covariance is not positive definite: {sigma_c}"
            )));
        }
        let inverse = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
        Ok(Self {
            sigma_c: m,
            eta_c: 2.0 * PI * det.sqrt(),
            inverse,
        })
    }

    /// Squared Mahalanobis distance of `d` under `Σc`.
    #[inline]
    pub fn mahalanobis_sq(&self, d: &Vector2<f64>) -> f64 {
        let a = &self.inverse;
        d[0] * (a[(0, 0)] * d[0] + a[(0, 1)] * d[1]) + d[1] * (a[(1, 0)] * d[0] + a[(1, 1)] * d[1])
    }
}

#[inline]
fn det2(m: &Matrix2<f64>) -> f64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

/// `Σc = Σx + Σo`; symmetric in its arguments.
pub fn combine(pos_cov_robot: &Matrix2<f64>, pos_cov_obstacle: &Matrix2<f64>) -> Result<CombinedCov> {
    CombinedCov::new(pos_cov_robot + pos_cov_obstacle)
}

/// Approximate collision probability, clipped to `[0, 1]`.
pub fn collision_probability(
    p_robot: &Vector2<f64>,
    p_obstacle: &Vector2<f64>,
    cc: &CombinedCov,
    params: &ChanceParams,
) -> f64 {
    let d2 = cc.mahalanobis_sq(&(p_robot - p_obstacle));
    (params.area() / cc.eta_c * (-0.5 * d2).exp()).clamp(0.0, 1.0)
}

/// Mahalanobis threshold `κ = -2 ln(η δ / A)`. Non-positive values mean the
/// constraint cannot be violated.
pub fn kappa(cc: &CombinedCov, params: &ChanceParams) -> f64 {
    -2.0 * (cc.eta_c * params.delta / params.area()).ln()
}

/// True when the squared Mahalanobis distance falls strictly below `κ`.
pub fn violates(
    p_robot: &Vector2<f64>,
    p_obstacle: &Vector2<f64>,
    cc: &CombinedCov,
    params: &ChanceParams,
) -> bool {
    cc.mahalanobis_sq(&(p_robot - p_obstacle)) < kappa(cc, params)
}

fn sampler(cov: &Matrix2<f64>) -> Matrix2<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    sym.cholesky()
        .or_else(|| (sym + Matrix2::identity() * JITTER).cholesky())
        .map(|c| c.l())
        .unwrap_or_else(Matrix2::zeros)
}

/// Monte-Carlo estimate of the exact collision probability: the fraction
/// of independent (robot, obstacle) position draws with the obstacle point
/// inside the robot disc.
pub fn mc_collision_oracle<R: Rng + ?Sized>(
    p_robot: &Vector2<f64>,
    cov_robot: &Matrix2<f64>,
    p_obstacle: &Vector2<f64>,
    cov_obstacle: &Matrix2<f64>,
    robot_radius: f64,
    n_samples: usize,
    rng: &mut R,
) -> f64 {
    let lr = sampler(cov_robot);
    let lo = sampler(cov_obstacle);
    let r2 = robot_radius * robot_radius;
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let zr = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let zo = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let pr = p_robot + lr * zr;
        let po = p_obstacle + lo * zo;
        if (po - pr).norm_squared() <= r2 {
            hits += 1;
        }
    }
    hits as f64 / n_samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ChanceParams {
        ChanceParams::new(0.01, 0.2).unwrap()
    }

    #[test]
    fn combine_examples() {
        let i = Matrix2::identity();
        let cc = combine(&i, &i).unwrap();
        assert_eq!(cc.sigma_c, i * 2.0);
        assert_abs_diff_eq!(cc.eta_c, 4.0 * PI, epsilon = 1e-12);
        let cc = combine(&Matrix2::zeros(), &i).unwrap();
        assert_abs_diff_eq!(cc.eta_c, 2.0 * PI, epsilon = 1e-12);
        let a = Matrix2::new(0.3, 0.1, 0.1, 0.2);
        let b = Matrix2::new(1.0, -0.2, -0.2, 0.5);
        assert_eq!(combine(&a, &b).unwrap(), combine(&b, &a).unwrap());
        assert!(combine(&Matrix2::new(-1.0, 0.0, 0.0, -1.0), &Matrix2::zeros()).is_err());
    }

    #[test]
    fn eta_matches_determinant_definition() {
        let s = Matrix2::new(0.7, 0.2, 0.2, 0.4);
        let cc = CombinedCov::new(s).unwrap();
        assert_abs_diff_eq!(cc.eta_c, (s * 2.0 * PI).determinant().sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn probability_at_zero_distance() {
        let cc = CombinedCov::new(Matrix2::identity()).unwrap();
        let p = collision_probability(&Vector2::zeros(), &Vector2::zeros(), &cc, &params());
        assert_abs_diff_eq!(p, 0.02, epsilon = 1e-12);
        let far = collision_probability(&Vector2::new(1e3, 0.0), &Vector2::zeros(), &cc, &params());
        assert_eq!(far, 0.0);
    }

    #[test]
    fn probability_is_clipped() {
        let cc = CombinedCov::new(Matrix2::identity() * 1e-6).unwrap();
        let p = collision_probability(&Vector2::zeros(), &Vector2::zeros(), &cc, &params());
        assert_eq!(p, 1.0);
    }

    #[test]
    fn kappa_spot_value() {
        let cc = CombinedCov::new(Matrix2::identity()).unwrap();
        assert_abs_diff_eq!(kappa(&cc, &params()), 2.0 * 2f64.ln(), epsilon = 1e-12);
        let p = params();
        let at_one = ChanceParams::new(p.area() / cc.eta_c, 0.2).unwrap();
        assert_abs_diff_eq!(kappa(&cc, &at_one), 0.0, epsilon = 1e-12);
        let looser = ChanceParams::new(0.02, 0.2).unwrap();
        assert!(kappa(&cc, &looser) < kappa(&cc, &p));
    }

    #[test]
    fn violation_examples() {
        let cc = CombinedCov::new(Matrix2::identity()).unwrap();
        let o = Vector2::zeros();
        assert!(!violates(&Vector2::new(1.2, 0.0), &o, &cc, &params()));
        assert!(violates(&Vector2::new(1.0, 0.0), &o, &cc, &params()));
        // κ <= 0: huge combined uncertainty.
        let wide = CombinedCov::new(Matrix2::identity() * 50.0).unwrap();
        assert!(kappa(&wide, &params()) <= 0.0);
        assert!(!violates(&o, &o, &wide, &params()));
    }

    #[test]
    fn oracle_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Matrix2::zeros();
        let apart = mc_collision_oracle(&Vector2::zeros(), &z, &Vector2::new(0.5, 0.0), &z, 0.2, 10_000, &mut rng);
        assert_eq!(apart, 0.0);
        let same = mc_collision_oracle(&Vector2::zeros(), &z, &Vector2::zeros(), &z, 0.2, 10_000, &mut rng);
        assert_eq!(same, 1.0);
    }

    #[test]
    fn oracle_agrees_at_coincident_means() {
        let half = Matrix2::identity() * 0.5;
        let p = ChanceParams::new(0.01, 0.05).unwrap();
        let cc = combine(&half, &half).unwrap();
        let approx = collision_probability(&Vector2::zeros(), &Vector2::zeros(), &cc, &p);
        assert_abs_diff_eq!(approx, p.area() / (2.0 * PI), epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mc = mc_collision_oracle(&Vector2::zeros(), &half, &Vector2::zeros(), &half, 0.05, 1_000_000, &mut rng);
        assert!((mc - approx).abs() / approx < 0.1, "mc {mc} vs {approx}");
    }

    fn rotation(phi: f64) -> Matrix2<f64> {
        let (s, c) = phi.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    proptest! {
        #[test]
        fn violation_iff_probability_exceeds_delta(
            px in -3.0f64..3.0, py in -3.0f64..3.0,
            a in 0.05f64..2.0, b in 0.05f64..2.0, phi in 0.0f64..3.2,
            delta in 1e-3f64..0.1, r in 0.05f64..0.3,
        ) {
            let rot = rotation(phi);
            let cc = CombinedCov::new(rot * Matrix2::new(a, 0.0, 0.0, b) * rot.transpose()).unwrap();
            let p = ChanceParams::new(delta, r).unwrap();
            let pr = Vector2::new(px, py);
            prop_assert_eq!(
                violates(&pr, &Vector2::zeros(), &cc, &p),
                collision_probability(&pr, &Vector2::zeros(), &cc, &p) > delta
            );
        }

        #[test]
        fn frame_invariance(
            px in -3.0f64..3.0, py in -3.0f64..3.0,
            a in 0.05f64..2.0, b in 0.05f64..2.0, phi in 0.0f64..3.2,
        ) {
            let p = params();
            let s = Matrix2::new(a, 0.1 * a.min(b), 0.1 * a.min(b), b);
            let cc = CombinedCov::new(s).unwrap();
            let rot = rotation(phi);
            let ccr = CombinedCov::new(rot * s * rot.transpose()).unwrap();
            let d = Vector2::new(px, py);
            let dr = rot * d;
            prop_assert!((cc.mahalanobis_sq(&d) - ccr.mahalanobis_sq(&dr)).abs() < 1e-9);
            prop_assert!((kappa(&cc, &p) - kappa(&ccr, &p)).abs() < 1e-9);
            let p1 = collision_probability(&d, &Vector2::zeros(), &cc, &p);
            let p2 = collision_probability(&dr, &Vector2::zeros(), &ccr, &p);
            prop_assert!((p1 - p2).abs() < 1e-12);
        }

        #[test]
        fn probability_monotone_in_distance(s1 in 0.0f64..4.0, s2 in 0.0f64..4.0) {
            let cc = CombinedCov::new(Matrix2::new(0.8, 0.2, 0.2, 0.5)).unwrap();
            let dir = Vector2::new(0.6, 0.8);
            let (near, far) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let pn = collision_probability(&(dir * near), &Vector2::zeros(), &cc, &params());
            let pf = collision_probability(&(dir * far), &Vector2::zeros(), &cc, &params());
            prop_assert!(pf <= pn);
        }
    }
}
