//! Unicycle kinematics, control box limits and perturbation sampling.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Planar pose of the robot. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Linear and angular velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

impl Control {
    pub const ZERO: Control = Control { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.omega)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }
}

impl std::ops::Add for Control {
    type Output = Control;

    fn add(self, rhs: Control) -> Control {
        Control::new(self.v + rhs.v, self.omega + rhs.omega)
    }
}

impl std::ops::Sub for Control {
    type Output = Control;

    fn sub(self, rhs: Control) -> Control {
        Control::new(self.v - rhs.v, self.omega - rhs.omega)
    }
}

/// Feasible control box `v_min <= v <= v_max`, `|omega| <= omega_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    #[serde(rename = "v_min_mps")]
    pub v_min: f64,
    #[serde(rename = "v_max_mps")]
    pub v_max: f64,
    #[serde(rename = "omega_max_radps")]
    pub omega_max: f64,
}

impl ControlLimits {
    pub fn new(v_min: f64, v_max: f64, omega_max: f64) -> Result<Self> {
        let limits = Self {
            v_min,
            v_max,
            omega_max,
        };
        limits.validate()?;
        Ok(limits)
    }

    /// Reverse speed down to half the forward limit and a turn rate of 2 rad/s.
    pub fn for_max_speed(v_max: f64) -> Result<Self> {
        Self::new(-0.5 * v_max, v_max, 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(Error::config("limits.v_min_mps", "v_min must be finite and below v_max"));
        }
        if !(self.omega_max.is_finite() && self.omega_max > 0.0) {
            return Err(Error::config("limits.omega_max_radps", "omega_max must be positive"));
        }
        Ok(())
    }

    /// Componentwise projection onto the box.
    #[inline]
    pub fn clamp(&self, u: Control) -> Control {
        Control {
            v: u.v.clamp(self.v_min, self.v_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }

    pub fn contains(&self, u: Control) -> bool {
        u.v >= self.v_min && u.v <= self.v_max && u.omega.abs() <= self.omega_max
    }
}

pub fn clamp(control: Control, limits: &ControlLimits) -> Control {
    limits.clamp(control)
}

/// Covariance of the additive control perturbations together with its
/// lower Cholesky factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    sigma_u: Matrix2<f64>,
    factor: Matrix2<f64>,
}

impl NoiseConfig {
    pub fn new(sigma_u: Matrix2<f64>) -> Result<Self> {
        if !sigma_u.iter().all(|v| v.is_finite()) {
            return Err(Error::config("sigma_u", "entries must be finite"));
        }
        if (sigma_u[(0, 1)] - sigma_u[(1, 0)]).abs() > 1e-12 {
            return Err(Error::config("sigma_u", "matrix must be symmetric"));
        }
        let factor = sigma_u
            .cholesky()
            .ok_or_else(|| Error::config("sigma_u", "matrix must be positive definite"))?
            .l();
        Ok(Self { sigma_u, factor })
    }

    pub fn diagonal(var_v: f64, var_omega: f64) -> Result<Self> {
        Self::new(Matrix2::new(var_v, 0.0, 0.0, var_omega))
    }

    pub fn sigma_u(&self) -> &Matrix2<f64> {
        &self.sigma_u
    }

    /// One draw of `N(0, sigma_u)`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Control {
        let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let d = self.factor * z;
        Control::new(d[0], d[1])
    }
}

pub fn sample_perturbations<R: Rng + ?Sized>(
    rng: &mut R,
    noise: &NoiseConfig,
    n_steps: usize,
) -> Vec<Control> {
    (0..n_steps).map(|_| noise.sample(rng)).collect()
}

/// Principal value of an angle in `(-pi, pi]`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Forward-Euler unicycle step without input checks. Used on the hot path
/// once a caller has validated its inputs.
#[inline]
pub fn advance(state: &RobotState, u: Control, dt: f64) -> RobotState {
    let (s, c) = state.theta.sin_cos();
    RobotState {
        x: state.x + u.v * c * dt,
        y: state.y + u.v * s * dt,
        theta: wrap_angle(state.theta + u.omega * dt),
    }
}

pub fn step(state: &RobotState, control: Control, dt: f64) -> Result<RobotState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if !state.is_finite() || !control.is_finite() {
        return Err(Error::Domain("non-finite state or control".into()));
    }
    Ok(advance(state, control, dt))
}

/// Rolls `state` forward under `clamp(nominal[k] + perturbations[k])`.
/// Returns `N + 1` states, the first being `state`.
pub fn rollout(
    state: &RobotState,
    nominal: &[Control],
    perturbations: &[Control],
    limits: &ControlLimits,
    dt: f64,
) -> Result<Vec<RobotState>> {
    if nominal.len() != perturbations.len() {
        return Err(Error::Domain(format!(
            "nominal has {} steps but perturbations have {}",
            nominal.len(),
            perturbations.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if !state.is_finite()
        || !nominal.iter().chain(perturbations).all(Control::is_finite)
    {
        return Err(Error::Domain("non-finite rollout input".into()));
    }
    let mut traj = Vec::with_capacity(nominal.len() + 1);
    traj.push(*state);
    let mut x = *state;
    for (u, du) in nominal.iter().zip(perturbations) {
        x = advance(&x, limits.clamp(*u + *du), dt);
        traj.push(x);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn assert_state(a: RobotState, b: RobotState) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
        assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-12);
    }

    #[test]
    fn step_examples() {
        let dt = 0.1;
        let s = step(&RobotState::new(0.0, 0.0, 0.0), Control::new(1.0, 0.0), dt).unwrap();
        assert_state(s, RobotState::new(0.1, 0.0, 0.0));
        let s = step(&RobotState::new(0.0, 0.0, FRAC_PI_2), Control::new(1.0, 0.0), dt).unwrap();
        assert_state(s, RobotState::new(0.0, 0.1, FRAC_PI_2));
        let s = step(&RobotState::new(0.0, 0.0, 0.0), Control::new(0.0, 1.0), dt).unwrap();
        assert_state(s, RobotState::new(0.0, 0.0, 0.1));
    }

    #[test]
    fn step_rejects_non_finite() {
        let s = RobotState::new(0.0, 0.0, 0.0);
        assert!(matches!(step(&s, Control::new(f64::NAN, 0.0), 0.1), Err(Error::Domain(_))));
        assert!(matches!(step(&s, Control::new(1.0, 0.0), 0.0), Err(Error::Domain(_))));
        let bad = RobotState { x: f64::INFINITY, y: 0.0, theta: 0.0 };
        assert!(step(&bad, Control::ZERO, 0.1).is_err());
    }

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5 * PI - TAU), -0.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn clamp_examples() {
        let limits = ControlLimits::new(-1.0, 2.0, 2.0).unwrap();
        assert_eq!(limits.clamp(Control::new(3.0, 0.0)), Control::new(2.0, 0.0));
        assert_eq!(limits.clamp(Control::new(1.0, -5.0)), Control::new(1.0, -2.0));
        let inside = Control::new(0.3, -0.7);
        assert_eq!(clamp(inside, &limits), inside);
    }

    #[test]
    fn limits_validation() {
        assert!(ControlLimits::new(1.0, 1.0, 1.0).is_err());
        assert!(ControlLimits::new(0.0, 1.0, 0.0).is_err());
        let d = ControlLimits::for_max_speed(1.0).unwrap();
        assert_eq!((d.v_min, d.v_max, d.omega_max), (-0.5, 1.0, 2.0));
    }

    #[test]
    fn degenerate_noise_rejected() {
        assert!(NoiseConfig::new(Matrix2::zeros()).is_err());
        assert!(NoiseConfig::new(Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(NoiseConfig::new(Matrix2::new(1.0, 0.1, 0.2, 1.0)).is_err());
    }

    #[test]
    fn perturbations_are_reproducible() {
        let noise = NoiseConfig::diagonal(0.09, 0.09).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = a.clone();
        assert_eq!(
            sample_perturbations(&mut a, &noise, 16),
            sample_perturbations(&mut b, &noise, 16)
        );
    }

    #[test]
    fn perturbation_covariance_matches() {
        let noise = NoiseConfig::diagonal(0.09, 0.09).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = sample_perturbations(&mut rng, &noise, 100_000);
        let n = draws.len() as f64;
        let mean = draws.iter().fold(Vector2::zeros(), |acc, d| acc + d.as_vector()) / n;
        let cov = draws.iter().fold(Matrix2::zeros(), |acc, d| {
            let e = d.as_vector() - mean;
            acc + e * e.transpose()
        }) / (n - 1.0);
        for i in 0..2 {
            assert!((cov[(i, i)] - 0.09).abs() / 0.09 < 0.05, "{cov}");
        }
        assert!(cov[(0, 1)].abs() < 0.05 * 0.09);
    }

    #[test]
    fn rollout_examples() {
        let limits = ControlLimits::for_max_speed(2.0).unwrap();
        let zero = vec![Control::ZERO; 5];
        let origin = RobotState::default();
        let traj = rollout(&origin, &zero, &zero, &limits, 0.1).unwrap();
        assert_eq!(traj.len(), 6);
        assert!(traj.iter().all(|s| *s == origin));

        let fwd = vec![Control::new(1.0, 0.0); 5];
        let traj = rollout(&origin, &fwd, &zero, &limits, 0.1).unwrap();
        for (k, s) in traj.iter().enumerate() {
            assert_abs_diff_eq!(s.x, 0.1 * k as f64, epsilon = 1e-12);
        }
        assert_eq!(traj, rollout(&origin, &fwd, &zero, &limits, 0.1).unwrap());
        assert!(rollout(&origin, &fwd, &zero[..4], &limits, 0.1).is_err());
    }

    #[test]
    fn rollout_clamps_sum() {
        let limits = ControlLimits::new(-0.5, 1.0, 2.0).unwrap();
        let nominal = vec![Control::new(0.8, 0.0)];
        let du = vec![Control::new(0.8, 0.0)];
        let traj = rollout(&RobotState::default(), &nominal, &du, &limits, 1.0).unwrap();
        assert_abs_diff_eq!(traj[1].x, 1.0, epsilon = 1e-12);
    }

    fn rotate(s: &RobotState, phi: f64) -> RobotState {
        let (sn, cs) = phi.sin_cos();
        RobotState::new(cs * s.x - sn * s.y, sn * s.x + cs * s.y, s.theta + phi)
    }

    proptest! {
        #[test]
        fn wrap_closure(theta in -3.0f64..3.0, omegas in prop::collection::vec(-5.0f64..5.0, 1..60)) {
            let mut s = RobotState::new(0.0, 0.0, theta);
            for w in omegas {
                s = advance(&s, Control::new(0.5, w), 0.3);
                prop_assert!(s.theta > -PI && s.theta <= PI);
            }
        }

        #[test]
        fn clamp_idempotent(v in -10.0f64..10.0, w in -10.0f64..10.0) {
            let limits = ControlLimits::for_max_speed(1.5).unwrap();
            let once = limits.clamp(Control::new(v, w));
            prop_assert_eq!(limits.clamp(once), once);
            prop_assert!(limits.contains(once));
        }

        #[test]
        fn rollout_rotation_equivariant(
            x in -5.0f64..5.0, y in -5.0f64..5.0, th in -3.0f64..3.0, phi in -3.0f64..3.0,
            us in prop::collection::vec((-0.5f64..1.0, -2.0f64..2.0), 1..30),
        ) {
            let limits = ControlLimits::for_max_speed(1.0).unwrap();
            let nominal: Vec<Control> = us.iter().map(|&(v, w)| Control::new(v, w)).collect();
            let zero = vec![Control::ZERO; nominal.len()];
            let start = RobotState::new(x, y, th);
            let a = rollout(&start, &nominal, &zero, &limits, 0.05).unwrap();
            let b = rollout(&rotate(&start, phi), &nominal, &zero, &limits, 0.05).unwrap();
            for (sa, sb) in a.iter().zip(&b) {
                let ra = rotate(sa, phi);
                prop_assert!((ra.x - sb.x).abs() < 1e-9);
                prop_assert!((ra.y - sb.y).abs() < 1e-9);
                prop_assert!(wrap_angle(ra.theta - sb.theta).abs() < 1e-9);
            }
        }
    }
}
