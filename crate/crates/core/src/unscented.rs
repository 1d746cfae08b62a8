//! Unscented transform over the robot pose: sigma-point expansion of a
//! Gaussian belief, pointwise propagation through the unicycle, and moment
//! recovery with a circular mean for the heading.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, wrap_angle, Control, ControlLimits, RobotState};
use crate::{Error, Result};

/// Pose dimension `n_x`.
pub const STATE_DIM: usize = 3;
/// Sigma points per batch, `2 n_x + 1`.
pub const N_SIGMA: usize = 2 * STATE_DIM + 1;

const JITTER: f64 = 1e-9;
const JITTER_DOUBLINGS: u32 = 3;

/// Mean pose and pose covariance (m², m², rad²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief {
    pub mean: RobotState,
    pub cov: Matrix3<f64>,
}

impl GaussianBelief {
    pub fn new(mean: RobotState, cov: Matrix3<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn deterministic(mean: RobotState) -> Self {
        Self::new(mean, Matrix3::zeros())
    }

    /// Planar (x, y) block of the covariance.
    #[inline]
    pub fn position_cov(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.cov.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("belief has non-finite entries".into()));
        }
        if (self.cov - self.cov.transpose()).amax() > 1e-9 {
            return Err(Error::Domain("belief covariance is not symmetric".into()));
        }
        let min_eig = self.cov.symmetric_eigenvalues().min();
        if min_eig < -1e-12 {
            return Err(Error::Domain(format!(
                "belief covariance is not PSD (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }
}

/// Sigma-point scaling: spread `alpha`, prior weight `beta`, secondary
/// scaling `k_sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub k_sigma: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            k_sigma: 0.0,
        }
    }
}

impl UtParams {
    /// `lambda_sigma = alpha^2 (n_x + k_sigma) - n_x`.
    pub fn lambda(&self) -> f64 {
        let n = STATE_DIM as f64;
        self.alpha * self.alpha * (n + self.k_sigma) - n
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("ut.alpha", "alpha must lie in (0, 1]"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("ut.beta", "beta must be non-negative"));
        }
        if !(self.k_sigma >= 0.0 && self.k_sigma.is_finite()) {
            return Err(Error::config("ut.k_sigma", "k_sigma must be non-negative"));
        }
        if STATE_DIM as f64 + self.lambda() <= 0.0 {
            return Err(Error::config("ut", "n_x + lambda_sigma must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtWeights {
    pub mean: [f64; N_SIGMA],
    pub cov: [f64; N_SIGMA],
    /// `n_x + lambda_sigma`, the scale applied to the covariance before the
    /// square root.
    pub spread: f64,
}

pub fn ut_weights(params: &UtParams) -> Result<UtWeights> {
    params.validate()?;
    let n = STATE_DIM as f64;
    let lambda = params.lambda();
    let spread = n + lambda;
    let w0 = lambda / spread;
    let wi = 1.0 / (2.0 * spread);
    let mut mean = [wi; N_SIGMA];
    let mut cov = [wi; N_SIGMA];
    mean[0] = w0;
    cov[0] = w0 + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(UtWeights { mean, cov, spread })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSet {
    pub points: [RobotState; N_SIGMA],
    pub weights: UtWeights,
}

/// Lower Cholesky factor of `a`, retrying with a growing diagonal jitter.
/// An exactly zero matrix has the zero matrix as its square root. The
/// jitter is `1e-9` for matrices of unit scale and shrinks with the largest
/// diagonal entry below that, so roundoff-sized covariances stay
/// roundoff-sized.
pub(crate) fn cholesky_jittered(a: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if a.iter().all(|v| *v == 0.0) {
        return Ok(Matrix3::zeros());
    }
    if let Some(c) = a.cholesky() {
        return Ok(c.l());
    }
    let scale = a.diagonal().amax().min(1.0);
    let mut jitter = JITTER * if scale > 0.0 { scale } else { 1.0 };
    for _ in 0..=JITTER_DOUBLINGS {
        if let Some(c) = (a + Matrix3::identity() * jitter).cholesky() {
            return Ok(c.l());
        }
        jitter *= 2.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky factorization failed for covariance {a}"
    )))
}

pub fn sigma_points(belief: &GaussianBelief, params: &UtParams) -> Result<SigmaSet> {
    let weights = ut_weights(params)?;
    sigma_points_with(belief, &weights)
}

/// Sigma expansion with precomputed weights.
pub fn sigma_points_with(belief: &GaussianBelief, weights: &UtWeights) -> Result<SigmaSet> {
    let root = cholesky_jittered(&(belief.cov * weights.spread))?;
    let mu = belief.mean;
    let mut points = [mu; N_SIGMA];
    for i in 0..STATE_DIM {
        let col = root.column(i);
        points[1 + i] = RobotState {
            x: mu.x + col[0],
            y: mu.y + col[1],
            theta: wrap_angle(mu.theta + col[2]),
        };
        points[1 + STATE_DIM + i] = RobotState {
            x: mu.x - col[0],
            y: mu.y - col[1],
            theta: wrap_angle(mu.theta - col[2]),
        };
    }
    Ok(SigmaSet {
        points,
        weights: *weights,
    })
}

/// Advances every point with the shared command `clamp(control + du)`.
pub fn propagate_batch(
    set: &SigmaSet,
    control: Control,
    du: Control,
    limits: &ControlLimits,
    dt: f64,
) -> SigmaSet {
    let u = limits.clamp(control + du);
    let mut out = *set;
    for p in out.points.iter_mut() {
        *p = advance(p, u, dt);
    }
    out
}

/// Weighted mean and covariance of a sigma set. The heading is averaged on
/// the circle and its residuals are wrapped.
pub fn recover(set: &SigmaSet) -> GaussianBelief {
    let w = &set.weights;
    let (mut mx, mut my, mut ms, mut mc) = (0.0, 0.0, 0.0, 0.0);
    for (p, wm) in set.points.iter().zip(&w.mean) {
        mx += wm * p.x;
        my += wm * p.y;
        let (s, c) = p.theta.sin_cos();
        ms += wm * s;
        mc += wm * c;
    }
    // The circular mean is only a reference; averaging wrapped residuals
    // around it keeps affine maps of the heading exact.
    let reference = ms.atan2(mc);
    let shift: f64 = set
        .points
        .iter()
        .zip(&w.mean)
        .map(|(p, wm)| wm * wrap_angle(p.theta - reference))
        .sum();
    let theta = wrap_angle(reference + shift);
    let mean = RobotState { x: mx, y: my, theta };
    let mut cov = Matrix3::zeros();
    for (p, wc) in set.points.iter().zip(&w.cov) {
        let e = Vector3::new(p.x - mx, p.y - my, wrap_angle(p.theta - theta));
        cov += e * e.transpose() * *wc;
    }
    cov = (cov + cov.transpose()) * 0.5;
    GaussianBelief { mean, cov }
}

/// Weighted mean of an arbitrary point cloud in the plane; helper for
/// callers that only need positions.
pub fn mean_position(set: &SigmaSet) -> Vector2<f64> {
    set.points
        .iter()
        .zip(&set.weights.mean)
        .fold(Vector2::zeros(), |acc, (p, w)| acc + p.position() * *w)
}
