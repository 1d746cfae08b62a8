//! Stage, control and terminal costs evaluated along every rollout.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::chance::{self, ChanceParams, CombinedCov};
use crate::dynamics::{wrap_angle, Control, RobotState};
use crate::prediction::ObstacleSnapshot;
use crate::world::Costmap;
use crate::{Error, Result};

/// Where the chance-constraint penalty is evaluated inside a sigma batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbEvaluation {
    /// Every sigma point is tested at its own position.
    #[default]
    PerSigmaPoint,
    /// The batch mean position is tested once and the result is shared by
    /// all sigma points.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Diagonal of the goal weight `Q`.
    pub q_diag: [f64; 3],
    /// Diagonal of the terminal weight; `None` reuses `Q`.
    pub q_terminal_diag: Option<[f64; 3]>,
    /// Diagonal of the control weight `R`.
    pub r_diag: [f64; 2],
    /// Risk sensitivity; negative is risk-averse.
    pub gamma_rs: f64,
    /// Exploration aggressiveness, `nu >= 1`.
    pub nu: f64,
    pub w_stc: f64,
    pub w_exp: f64,
    /// Sharpness of the exponential penalty, 1/m.
    #[serde(rename = "alpha_exp_per_m")]
    pub alpha_exp: f64,
    pub w_rep: f64,
    /// Stabilizer of the repulsive penalty, m².
    #[serde(rename = "gamma_rep_m2")]
    pub gamma_rep: f64,
    pub w_prob: f64,
    /// Safe centre distance to a pedestrian, m.
    #[serde(rename = "r_safe_m")]
    pub r_safe: f64,
    /// Value returned by the risk-sensitive cost when its log-determinant
    /// is undefined.
    pub rs_ceiling: f64,
    pub prob_evaluation: ProbEvaluation,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            q_diag: [8.0, 8.0, 2.0],
            q_terminal_diag: None,
            r_diag: [0.5, 0.5],
            gamma_rs: 1.0,
            nu: 2.0,
            w_stc: 1e3,
            w_exp: 500.0,
            alpha_exp: 40.0,
            w_rep: 50.0,
            gamma_rep: 0.3,
            w_prob: 1e3,
            r_safe: 1.0,
            rs_ceiling: 1e6,
            prob_evaluation: ProbEvaluation::PerSigmaPoint,
        }
    }
}

impl CostParams {
    pub fn q(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q_diag))
    }

    pub fn q_terminal(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q_terminal_diag.unwrap_or(self.q_diag)))
    }

    pub fn r(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::from(self.r_diag))
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_diag.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("costs.q_diag", "Q must be positive definite"));
        }
        if let Some(t) = self.q_terminal_diag {
            if t.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config("costs.q_terminal_diag", "entries must be non-negative"));
            }
        }
        if self.r_diag.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("costs.r_diag", "R must be positive definite"));
        }
        if self.gamma_rs == 0.0 || !self.gamma_rs.is_finite() {
            return Err(Error::config("costs.gamma_rs", "gamma must be finite and non-zero"));
        }
        if !(self.nu >= 1.0) {
            return Err(Error::config("costs.nu", "nu must be at least 1"));
        }
        for (name, w) in [
            ("costs.w_stc", self.w_stc),
            ("costs.w_exp", self.w_exp),
            ("costs.w_rep", self.w_rep),
            ("costs.w_prob", self.w_prob),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, "weights must be non-negative"));
            }
        }
        if !(self.alpha_exp > 0.0) {
            return Err(Error::config("costs.alpha_exp_per_m", "must be positive"));
        }
        if !(self.gamma_rep > 0.0) {
            return Err(Error::config("costs.gamma_rep_m2", "must be positive"));
        }
        if !(self.r_safe >= 0.0) {
            return Err(Error::config("costs.r_safe_m", "must be non-negative"));
        }
        Ok(())
    }
}

/// Pose error with the heading difference wrapped.
#[inline]
pub fn pose_error(state: &RobotState, goal: &RobotState) -> Vector3<f64> {
    Vector3::new(state.x - goal.x, state.y - goal.y, wrap_angle(state.theta - goal.theta))
}

#[inline]
fn quad3(m: &Matrix3<f64>, e: &Vector3<f64>) -> f64 {
    e.dot(&(m * e))
}

/// `‖x - x_f‖²_Q`.
pub fn q_goal_quadratic(state: &RobotState, goal: &RobotState, q: &Matrix3<f64>) -> f64 {
    quad3(q, &pose_error(state, goal))
}

/// Terminal cost `‖x_N - x_f‖²_{Q_terminal}`.
pub fn terminal_cost(state: &RobotState, goal: &RobotState, q_terminal: &Matrix3<f64>) -> f64 {
    quad3(q_terminal, &pose_error(state, goal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCost {
    pub value: f64,
    /// The log-determinant was undefined and `value` is the ceiling.
    pub saturated: bool,
}

/// Risk-sensitive goal cost for one covariance, shared by every sigma point
/// of a batch at one time step:
/// `(1/γ) log det(I + γ Q Σ) + ‖x - x_f‖²_{Q_rs}`, `Q_rs = (Q⁻¹ + γ Σ)⁻¹`.
#[derive(Debug, Clone, Copy)]
pub struct RiskSensitiveGoal {
    log_det_term: f64,
    q_rs: Matrix3<f64>,
    saturated: bool,
    ceiling: f64,
}

impl RiskSensitiveGoal {
    pub fn new(q: &Matrix3<f64>, cov: &Matrix3<f64>, gamma: f64, ceiling: f64) -> Self {
        let saturated = Self {
            log_det_term: ceiling,
            q_rs: Matrix3::zeros(),
            saturated: true,
            ceiling,
        };
        let det = (Matrix3::identity() + q * cov * gamma).determinant();
        if !(det > 0.0 && det.is_finite()) {
            return saturated;
        }
        let Some(q_inv) = q.try_inverse() else {
            return saturated;
        };
        let Some(q_rs) = (q_inv + cov * gamma).try_inverse() else {
            return saturated;
        };
        if !q_rs.iter().all(|v| v.is_finite()) {
            return saturated;
        }
        Self {
            log_det_term: det.ln() / gamma,
            q_rs: (q_rs + q_rs.transpose()) * 0.5,
            saturated: false,
            ceiling,
        }
    }

    #[inline]
    pub fn eval(&self, point: &RobotState, goal: &RobotState) -> RiskCost {
        if self.saturated {
            return RiskCost {
                value: self.ceiling,
                saturated: true,
            };
        }
        let value = self.log_det_term + quad3(&self.q_rs, &pose_error(point, goal));
        RiskCost {
            value: value.min(self.ceiling),
            saturated: false,
        }
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn weight(&self) -> &Matrix3<f64> {
        &self.q_rs
    }
}

pub fn q_rs(
    point: &RobotState,
    state_cov: &Matrix3<f64>,
    goal: &RobotState,
    q: &Matrix3<f64>,
    gamma: f64,
    ceiling: f64,
) -> RiskCost {
    RiskSensitiveGoal::new(q, state_cov, gamma, ceiling).eval(point, goal)
}

/// `w_stc` when the robot disc overlaps an occupied costmap cell.
#[inline]
pub fn q_static(state: &RobotState, costmap: &Costmap, w_stc: f64, robot_radius: f64) -> f64 {
    if costmap.disc_overlaps(&state.position(), robot_radius) {
        w_stc
    } else {
        0.0
    }
}

/// `w_exp Σ exp(-α (‖p - pⁱ‖ - r_safe))`.
#[inline]
pub fn q_exp(position: &Vector2<f64>, layer: &[ObstacleSnapshot], w_exp: f64, alpha_exp: f64, r_safe: f64) -> f64 {
    layer
        .iter()
        .map(|o| (-alpha_exp * ((position - o.position).norm() - r_safe)).exp())
        .sum::<f64>()
        * w_exp
}

/// `w_rep Σ 1 / (‖p - pⁱ‖² + γ_rep)`.
#[inline]
pub fn q_rep(position: &Vector2<f64>, layer: &[ObstacleSnapshot], w_rep: f64, gamma_rep: f64) -> f64 {
    layer
        .iter()
        .map(|o| 1.0 / ((position - o.position).norm_squared() + gamma_rep))
        .sum::<f64>()
        * w_rep
}

/// Chance-constraint tests against one layer for a fixed robot position
/// covariance: the combined covariances and thresholds are computed once
/// and reused for every sigma point.
#[derive(Debug, Clone)]
pub struct ProbCheck<'a> {
    layer: &'a [ObstacleSnapshot],
    combined: Vec<(CombinedCov, f64)>,
    /// Obstacles whose threshold is non-positive.
    pub vacuous: usize,
}

impl<'a> ProbCheck<'a> {
    pub fn new(layer: &'a [ObstacleSnapshot], robot_pos_cov: &Matrix2<f64>, params: &ChanceParams) -> Result<Self> {
        let mut combined = Vec::with_capacity(layer.len());
        let mut vacuous = 0;
        for o in layer {
            let cc = chance::combine(robot_pos_cov, &o.pos_cov)?;
            let k = chance::kappa(&cc, params);
            if k <= 0.0 {
                vacuous += 1;
            }
            combined.push((cc, k));
        }
        Ok(Self {
            layer,
            combined,
            vacuous,
        })
    }

    /// Number of obstacles whose Mahalanobis test is violated at `position`.
    #[inline]
    pub fn violations(&self, position: &Vector2<f64>) -> usize {
        self.layer
            .iter()
            .zip(&self.combined)
            .filter(|(o, (cc, k))| cc.mahalanobis_sq(&(position - o.position)) < *k)
            .count()
    }
}

/// `w_prob` times the number of obstacles violating the chance constraint.
pub fn q_prob(
    position: &Vector2<f64>,
    robot_pos_cov: &Matrix2<f64>,
    layer: &[ObstacleSnapshot],
    params: &ChanceParams,
    w_prob: f64,
) -> Result<f64> {
    Ok(w_prob * ProbCheck::new(layer, robot_pos_cov, params)?.violations(position) as f64)
}

/// `γ_u δuᵀRδu + uᵀRδu + ½ uᵀRu` with `γ_u = (ν - 1) / (2ν)`.
#[inline]
pub fn control_cost(u: Control, du: Control, r: &Matrix2<f64>, nu: f64) -> f64 {
    let gamma_u = (nu - 1.0) / (2.0 * nu);
    let (uv, dv) = (u.as_vector(), du.as_vector());
    gamma_u * dv.dot(&(r * dv)) + uv.dot(&(r * dv)) + 0.5 * uv.dot(&(r * uv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn obstacle(x: f64, y: f64) -> ObstacleSnapshot {
        ObstacleSnapshot {
            position: Vector2::new(x, y),
            pos_cov: Matrix2::identity() * 0.5,
            radius: 0.3,
        }
    }

    #[test]
    fn goal_cost_examples() {
        let q = CostParams::default().q();
        let g = RobotState::new(1.0, 2.0, 0.5);
        assert_eq!(q_goal_quadratic(&g, &g, &q), 0.0);
        assert_abs_diff_eq!(q_goal_quadratic(&RobotState::new(2.0, 2.0, 0.5), &g, &q), 8.0);
        let a = RobotState { x: 0.0, y: 0.0, theta: PI };
        let b = RobotState { x: 0.0, y: 0.0, theta: -PI };
        let origin = RobotState::default();
        assert_abs_diff_eq!(q_goal_quadratic(&a, &origin, &q), q_goal_quadratic(&b, &origin, &q), epsilon = 1e-12);
    }

    #[test]
    fn terminal_cost_examples() {
        let p = CostParams::default();
        let g = RobotState::new(1.0, 0.0, 0.0);
        let s = RobotState::new(-1.0, 0.5, 1.0);
        assert_eq!(terminal_cost(&g, &g, &p.q_terminal()), 0.0);
        assert_eq!(terminal_cost(&s, &g, &p.q_terminal()), q_goal_quadratic(&s, &g, &p.q()));
        assert_eq!(terminal_cost(&s, &g, &Matrix3::zeros()), 0.0);
    }

    #[test]
    fn risk_sensitive_reduces_without_uncertainty() {
        let q = CostParams::default().q();
        let s = RobotState::new(0.3, -1.2, 2.0);
        let g = RobotState::new(1.0, 1.0, -2.5);
        let rs = q_rs(&s, &Matrix3::zeros(), &g, &q, -1.0, 1e6);
        assert!(!rs.saturated);
        assert_abs_diff_eq!(rs.value, q_goal_quadratic(&s, &g, &q), epsilon = 1e-12);
    }

    #[test]
    fn risk_sensitive_isotropic_closed_form() {
        let rs = q_rs(
            &RobotState::new(1.0, 0.0, 0.0),
            &(Matrix3::identity() * 0.5),
            &RobotState::default(),
            &Matrix3::identity(),
            1.0,
            1e6,
        );
        // 3 ln 1.5 + 1 / 1.5
        assert_abs_diff_eq!(rs.value, 1.88307, epsilon = 1e-5);
        assert_abs_diff_eq!(rs.value, 3.0 * 1.5f64.ln() + 1.0 / 1.5, epsilon = 1e-12);
    }

    #[test]
    fn risk_sensitive_small_gamma_limit() {
        let q = CostParams::default().q();
        let cov = Matrix3::new(0.2, 0.01, 0.0, 0.01, 0.1, 0.02, 0.0, 0.02, 0.05);
        let s = RobotState::new(0.5, -0.4, 0.3);
        let g = RobotState::default();
        let gamma = 1e-6;
        let limit = (q * cov).trace() + q_goal_quadratic(&s, &g, &q);
        let v = q_rs(&s, &cov, &g, &q, gamma, 1e6).value;
        // First-order remainder is O(γ) with a modest constant here.
        assert!((v - limit).abs() < 100.0 * gamma, "{v} vs {limit}");
    }

    #[test]
    fn risk_sensitive_saturates() {
        let q = Matrix3::identity();
        let cov = Matrix3::identity() * 2.0;
        let rs = q_rs(&RobotState::default(), &cov, &RobotState::default(), &q, -1.0, 1e6);
        assert!(rs.saturated);
        assert_eq!(rs.value, 1e6);
    }

    #[test]
    fn static_cost_examples() {
        let robot = RobotState::default();
        let empty = Costmap::empty(Vector2::zeros(), 0.1, 4.0).unwrap();
        assert_eq!(q_static(&robot, &empty, 1e3, 0.2), 0.0);

        let wall = crate::world::StaticShape::rect(-0.02, -0.02, 0.02, 0.02);
        let map = crate::world::rasterize_costmap(&[wall], &robot, 0.1, 4.0).unwrap();
        assert_eq!(q_static(&robot, &map, 1e3, 0.2), 1e3);
        // Occupied cell spans [-0.05, 0.05]; a disc of radius 0.2 centred one
        // cell beyond r_r from the cell edge stays clear.
        let away = RobotState::new(0.05 + 0.2 + 0.1, 0.0, 0.0);
        assert_eq!(q_static(&away, &map, 1e3, 0.2), 0.0);
    }

    #[test]
    fn exponential_cost_examples() {
        let p = CostParams::default();
        let o = [obstacle(1.0, 0.0)];
        assert_abs_diff_eq!(q_exp(&Vector2::zeros(), &o, p.w_exp, p.alpha_exp, 1.0), 500.0, epsilon = 1e-9);
        let v = q_exp(&Vector2::new(-0.1, 0.0), &o, p.w_exp, p.alpha_exp, 1.0);
        assert_abs_diff_eq!(v, 500.0 * (-4.0f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(v, 9.158, epsilon = 1e-3);
        assert_eq!(q_exp(&Vector2::zeros(), &[], p.w_exp, p.alpha_exp, 1.0), 0.0);
    }

    #[test]
    fn repulsive_cost_examples() {
        let o = [obstacle(0.7f64.sqrt(), 0.0)];
        assert_abs_diff_eq!(q_rep(&Vector2::zeros(), &o, 50.0, 0.3), 50.0, epsilon = 1e-9);
        let c = q_rep(&Vector2::new(0.7f64.sqrt(), 0.0), &o, 50.0, 0.3);
        assert_abs_diff_eq!(c, 50.0 / 0.3, epsilon = 1e-9);
        assert!(c.is_finite());
    }

    #[test]
    fn prob_cost_examples() {
        let params = ChanceParams::default();
        let z = Matrix2::zeros();
        assert_eq!(q_prob(&Vector2::zeros(), &z, &[], &params, 1e3).unwrap(), 0.0);
        let mut o = obstacle(0.5, 0.0);
        o.pos_cov = Matrix2::identity();
        assert_eq!(q_prob(&Vector2::zeros(), &z, &[o], &params, 1e3).unwrap(), 1e3);

        // Place the obstacle exactly on the boundary d² = κ.
        let cc = chance::combine(&z, &o.pos_cov).unwrap();
        let k = chance::kappa(&cc, &params);
        let check = ProbCheck::new(std::slice::from_ref(&o), &z, &params).unwrap();
        let mut boundary = None;
        for scale in [1.0, 1.0 + 1e-16, 1.0 - 1e-16, 1.0 + 2e-16, 1.0 - 2e-16] {
            let p = Vector2::new(0.5 + k.sqrt() * scale, 0.0);
            if cc.mahalanobis_sq(&(p - o.position)) == k {
                boundary = Some(p);
            }
        }
        if let Some(p) = boundary {
            assert_eq!(check.violations(&p), 0);
        }
        assert_eq!(check.violations(&Vector2::new(0.5 + k.sqrt() * 1.001, 0.0)), 0);
        assert_eq!(check.violations(&Vector2::new(0.5 + k.sqrt() * 0.999, 0.0)), 1);
    }

    #[test]
    fn control_cost_examples() {
        let r = Matrix2::identity() * 0.5;
        let u = Control::new(1.0, -0.4);
        assert_abs_diff_eq!(control_cost(u, Control::ZERO, &r, 1.0), 0.5 * 0.5 * (1.0 + 0.16), epsilon = 1e-12);
        assert_abs_diff_eq!(
            control_cost(Control::ZERO, Control::new(1.0, 0.0), &Matrix2::identity(), 2.0),
            0.25,
            epsilon = 1e-12
        );
        let d = Control::new(0.3, 0.2);
        let first = control_cost(Control::ZERO, d, &r, 3.0);
        let scaled = control_cost(Control::ZERO, Control::new(0.9, 0.6), &r, 3.0);
        assert_abs_diff_eq!(scaled, 9.0 * first, epsilon = 1e-12);
    }

    #[test]
    fn validation() {
        assert!(CostParams::default().validate().is_ok());
        assert!(CostParams { nu: 0.5, ..Default::default() }.validate().is_err());
        assert!(CostParams { gamma_rs: 0.0, ..Default::default() }.validate().is_err());
        assert!(CostParams { q_diag: [1.0, 0.0, 1.0], ..Default::default() }.validate().is_err());
    }

    fn psd_from(seed: &[f64; 9], scale: f64) -> Matrix3<f64> {
        let a = Matrix3::from_row_slice(seed);
        a * a.transpose() * scale
    }

    proptest! {
        #[test]
        fn rs_matches_quadratic_at_zero_cov(
            x in -5.0f64..5.0, y in -5.0f64..5.0, t in -3.0f64..3.0, gamma in prop_oneof![-2.0f64..-0.1, 0.1f64..2.0],
        ) {
            let q = CostParams::default().q();
            let s = RobotState::new(x, y, t);
            let g = RobotState::new(0.5, -0.5, 1.0);
            let v = q_rs(&s, &Matrix3::zeros(), &g, &q, gamma, 1e6).value;
            prop_assert!((v - q_goal_quadratic(&s, &g, &q)).abs() <= 1e-12 * (1.0 + v.abs()));
        }

        #[test]
        fn risk_averse_weight_grows_with_uncertainty(
            a in prop::array::uniform9(-1.0f64..1.0),
            b in prop::array::uniform9(-1.0f64..1.0),
            e in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let q = Matrix3::from_diagonal(&Vector3::new(8.0, 8.0, 2.0));
            let gamma = -0.05;
            let small = psd_from(&a, 0.1);
            let large = small + psd_from(&b, 0.1);
            let lo = RiskSensitiveGoal::new(&q, &small, gamma, 1e6);
            let hi = RiskSensitiveGoal::new(&q, &large, gamma, 1e6);
            prop_assume!(!lo.is_saturated() && !hi.is_saturated());
            let e = Vector3::from(e);
            prop_assert!(e.dot(&(hi.weight() * e)) >= e.dot(&(lo.weight() * e)) - 1e-9);
        }

        #[test]
        fn dynamic_costs_are_additive(
            px in -2.0f64..2.0, py in -2.0f64..2.0,
            obs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..6),
        ) {
            let layer: Vec<_> = obs.iter().map(|&(x, y)| obstacle(x, y)).collect();
            let p = Vector2::new(px, py);
            let total_exp = q_exp(&p, &layer, 500.0, 40.0, 1.0);
            let total_rep = q_rep(&p, &layer, 50.0, 0.3);
            let sum_exp: f64 = layer.iter().map(|o| q_exp(&p, std::slice::from_ref(o), 500.0, 40.0, 1.0)).sum();
            let sum_rep: f64 = layer.iter().map(|o| q_rep(&p, std::slice::from_ref(o), 50.0, 0.3)).sum();
            prop_assert!((total_exp - sum_exp).abs() <= 1e-9 * (1.0 + total_exp));
            prop_assert!((total_rep - sum_rep).abs() <= 1e-9 * (1.0 + total_rep));
        }

        #[test]
        fn repulsion_decreases_with_distance(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0) {
            prop_assume!(d1 != d2);
            let o = [obstacle(0.0, 0.0)];
            let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(q_rep(&Vector2::new(far, 0.0), &o, 50.0, 0.3) < q_rep(&Vector2::new(near, 0.0), &o, 50.0, 0.3));
        }

        #[test]
        fn prob_cost_matches_chance_module(
            px in -3.0f64..3.0, py in -3.0f64..3.0,
            obs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.05f64..1.5), 0..5),
        ) {
            let params = ChanceParams::default();
            let robot_cov = Matrix2::identity() * 0.001;
            let layer: Vec<_> = obs.iter().map(|&(x, y, v)| ObstacleSnapshot {
                position: Vector2::new(x, y), pos_cov: Matrix2::identity() * v, radius: 0.3,
            }).collect();
            let p = Vector2::new(px, py);
            let any = layer.iter().any(|o| {
                let cc = chance::combine(&robot_cov, &o.pos_cov).unwrap();
                chance::violates(&p, &o.position, &cc, &params)
            });
            let cost = q_prob(&p, &robot_cov, &layer, &params, 1e3).unwrap();
            prop_assert_eq!(cost > 0.0, any);
        }
    }
}
