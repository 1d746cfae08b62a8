//! Scenario files: world, mission, controller and estimator settings in one
//! JSON document. Numeric fields carry their unit in the name.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, Variant};
use crate::costs::CostParams;
use crate::dynamics::RobotState;
use crate::prediction::TrackerConfig;
use crate::world::{Extents, InteractionMode, PedestrianScript, StaticShape, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default)]
    pub theta_rad: f64,
}

impl Pose {
    pub fn new(x_m: f64, y_m: f64, theta_rad: f64) -> Self {
        Self { x_m, y_m, theta_rad }
    }

    pub fn state(&self) -> RobotState {
        RobotState::new(self.x_m, self.y_m, self.theta_rad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub start: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalTolerance {
    pub position_m: f64,
    pub heading_rad: f64,
}

impl Default for GoalTolerance {
    fn default() -> Self {
        Self {
            position_m: 0.2,
            heading_rad: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSpec {
    /// Pedestrian prediction span. Unset means 2 s for `c2umppi` and no
    /// prediction (the current estimate held over the horizon) otherwise.
    pub np_seconds: Option<f64>,
    /// Step of the tracker's forward prediction.
    pub dt_p_s: f64,
    /// Position variance each prediction starts from. Null uses the filter
    /// posterior, which is usually far tighter than a pedestrian's size.
    pub start_pos_var_m2: Option<f64>,
}

impl Default for PredictionSpec {
    fn default() -> Self {
        Self {
            np_seconds: None,
            dt_p_s: 0.1,
            start_pos_var_m2: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostmapSpec {
    pub resolution_m: f64,
    /// Side length of the robot-centred window.
    pub extent_m: f64,
}

impl Default for CostmapSpec {
    fn default() -> Self {
        Self {
            resolution_m: 0.05,
            extent_m: 8.0,
        }
    }
}

fn default_state_var() -> [f64; 3] {
    [0.001; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time after which a trial stops.
    pub duration_s: f64,
    pub robot: RobotSpec,
    pub goals: Vec<Pose>,
    #[serde(default)]
    pub goal_tolerance: GoalTolerance,
    pub world: WorldConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub prediction: PredictionSpec,
    #[serde(default)]
    pub costmap: CostmapSpec,
    /// Diagonal of the initial pose covariance (m², m², rad²).
    #[serde(default = "default_state_var")]
    pub initial_state_var: [f64; 3],
}

/// Failure to obtain a scenario document, kept apart from validation
/// findings.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_path(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text).map_err(|source| LoadError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Prediction span used by `variant`.
    pub fn np_seconds(&self, variant: Variant) -> f64 {
        self.prediction
            .np_seconds
            .unwrap_or(if variant == Variant::C2umppi { 2.0 } else { 0.0 })
    }

    /// Structural and invariant checks. An empty report means the scenario
    /// can be run.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |field: String, message: String| out.push(Violation { field, message });
        let ext = &self.world.extents;
        if !(ext.x_min_m < ext.x_max_m && ext.y_min_m < ext.y_max_m) {
            bad("world.extents".into(), "minimum must lie below maximum on both axes".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            bad("duration_s".into(), "must be positive".into());
        }
        let start = self.robot.start;
        if !ext.contains(&Vector2::new(start.x_m, start.y_m)) {
            bad("robot.start".into(), "start lies outside the world extents".into());
        }
        if self.goals.is_empty() {
            bad("goals".into(), "at least one goal is required".into());
        }
        for (i, g) in self.goals.iter().enumerate() {
            if !(g.x_m.is_finite() && g.y_m.is_finite() && g.theta_rad.is_finite()) {
                bad(format!("goals[{i}]"), "pose must be finite".into());
            } else if !ext.contains(&Vector2::new(g.x_m, g.y_m)) {
                bad(format!("goals[{i}]"), format!("goal ({}, {}) lies outside the world extents", g.x_m, g.y_m));
            }
        }
        let tol = &self.goal_tolerance;
        if !(tol.position_m > 0.0 && tol.heading_rad > 0.0) {
            bad("goal_tolerance".into(), "tolerances must be positive".into());
        }
        if !(self.world.robot_radius_m > 0.0) {
            bad("world.robot_radius_m".into(), "must be positive".into());
        }
        if (self.world.robot_radius_m - self.controller.chance.robot_radius).abs() > 1e-12 {
            bad(
                "controller.chance.robot_radius_m".into(),
                format!("differs from world.robot_radius_m ({})", self.world.robot_radius_m),
            );
        }
        for (i, p) in self.world.pedestrians.iter().enumerate() {
            let field = |f: &str| format!("world.pedestrians[{i}].{f}");
            if p.waypoints_m.is_empty() {
                bad(field("waypoints_m"), "needs at least one waypoint".into());
            }
            if p.waypoints_m.iter().any(|w| !ext.contains(&Vector2::from(*w))) {
                bad(field("waypoints_m"), "waypoint outside the world extents".into());
            }
            if !(p.max_speed_mps >= 0.0 && p.max_speed_mps.is_finite()) {
                bad(field("max_speed_mps"), "must be non-negative".into());
            }
            if !(p.speed_fraction > 0.0 && p.speed_fraction <= 1.0) {
                bad(field("speed_fraction"), "must lie in (0, 1]".into());
            }
            if !(p.radius_m > 0.0) {
                bad(field("radius_m"), "must be positive".into());
            }
        }
        if !(self.world.cm_repulsion_gain >= 0.0) {
            bad("world.cm_repulsion_gain".into(), "must be non-negative".into());
        }
        // The controller reports its first violation with a scoped field.
        if let Err(crate::Error::Config { field, reason }) = self.controller.validate() {
            bad(field, reason);
        }
        if let Err(crate::Error::Config { field, reason }) = self.tracker.validate() {
            bad(field, reason);
        }
        if self.initial_state_var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            bad("initial_state_var".into(), "variances must be non-negative".into());
        }
        if let Some(np) = self.prediction.np_seconds {
            if !(np >= 0.0 && np.is_finite()) {
                bad("prediction.np_seconds".into(), "must be non-negative".into());
            }
        }
        if let Some(v) = self.prediction.start_pos_var_m2 {
            if !(v > 0.0 && v.is_finite()) {
                bad("prediction.start_pos_var_m2".into(), "must be positive".into());
            }
        }
        if !(self.prediction.dt_p_s > 0.0) {
            bad("prediction.dt_p_s".into(), "must be positive".into());
        }
        if !(self.costmap.resolution_m > 0.0) {
            bad("costmap.resolution_m".into(), "must be positive".into());
        }
        if !(self.costmap.extent_m > 0.0) {
            bad("costmap.extent_m".into(), "must be positive".into());
        }
        out
    }

    /// Open 10 m × 10 m square with a single goal 5 m ahead of the robot.
    pub fn empty_world() -> Self {
        Self {
            name: "empty-10m".into(),
            seed: 0,
            duration_s: 15.0,
            robot: RobotSpec {
                start: Pose::new(2.0, 0.0, 0.0),
            },
            goals: vec![Pose::new(7.0, 0.0, 0.0)],
            goal_tolerance: GoalTolerance::default(),
            world: WorldConfig {
                extents: Extents {
                    x_min_m: 0.0,
                    x_max_m: 10.0,
                    y_min_m: -5.0,
                    y_max_m: 5.0,
                },
                static_obstacles: Vec::new(),
                pedestrians: Vec::new(),
                mode: InteractionMode::Ncm,
                robot_radius_m: 0.2,
                cm_repulsion_gain: 0.5,
            },
            controller: ControllerConfig::default(),
            tracker: TrackerConfig::default(),
            prediction: PredictionSpec::default(),
            costmap: CostmapSpec::default(),
            initial_state_var: default_state_var(),
        }
    }

    /// 20 m × 6 m walled corridor with six scripted pedestrians, three
    /// walking each way. The robot drives to the far end and back.
    pub fn desk_corridor() -> Self {
        let walker = |from: [f64; 2], to: [f64; 2], speed: f64| PedestrianScript {
            waypoints_m: vec![from, to],
            max_speed_mps: speed,
            speed_fraction: DESK_SPEED_FRACTION,
            radius_m: 0.3,
        };
        Self {
            name: "desk-corridor".into(),
            seed: 0,
            duration_s: 80.0,
            robot: RobotSpec {
                start: Pose::new(1.0, 0.0, 0.0),
            },
            goals: vec![
                Pose::new(19.0, 0.5, 100f64.to_radians()),
                Pose::new(1.0, 0.0, 180f64.to_radians()),
            ],
            goal_tolerance: GoalTolerance::default(),
            world: WorldConfig {
                // The walkable corridor is y in [-3, 3]; the margin holds the
                // side rooms the crossing walkers turn around in.
                extents: Extents {
                    x_min_m: 0.0,
                    x_max_m: 20.0,
                    y_min_m: -5.0,
                    y_max_m: 5.0,
                },
                // Solid building around the corridor. Walkers cross it through
                // doors the robot cannot use.
                static_obstacles: vec![
                    StaticShape::rect(-2.5, 3.0, 22.5, 5.2),
                    StaticShape::rect(-2.5, -5.2, 22.5, -3.0),
                    StaticShape::rect(-2.5, -3.0, -0.3, 3.0),
                    StaticShape::rect(20.3, -3.0, 22.5, 3.0),
                ],
                pedestrians: vec![
                    walker([6.0, -4.5], [6.0, 4.5], 1.0),
                    walker([14.0, 4.5], [14.0, -4.5], 1.0),
                    walker([3.0, 2.2], [17.0, 2.2], 1.2),
                    walker([17.0, -2.2], [3.0, -2.2], 1.0),
                    walker([9.0, -2.6], [11.0, 2.6], 0.7),
                    walker([16.0, 2.2], [4.0, 2.2], 0.6),
                ],
                mode: InteractionMode::Ncm,
                robot_radius_m: 0.2,
                cm_repulsion_gain: 0.5,
            },
            // The robot is not stopped by walls, so a wall contact has to
            // cost more than standing in every pedestrian's chance region.
            controller: ControllerConfig {
                costs: CostParams {
                    w_stc: 1e4,
                    ..CostParams::default()
                },
                ..ControllerConfig::default()
            },
            // Scripted walkers keep straight lines between turns.
            tracker: TrackerConfig {
                accel_noise: [0.1, 0.1],
                ..TrackerConfig::default()
            },
            prediction: PredictionSpec::default(),
            costmap: CostmapSpec::default(),
            initial_state_var: default_state_var(),
        }
    }
}

/// Values that replace scenario settings before a run. Unset fields keep
/// the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub gamma_rs: Option<f64>,
    pub delta: Option<f64>,
    pub np_seconds: Option<f64>,
    pub horizon_steps: Option<usize>,
    pub dt_s: Option<f64>,
    pub n_rollouts: Option<usize>,
    pub n_batches: Option<usize>,
    pub lambda: Option<f64>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        let c = &mut s.controller;
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.gamma_rs {
            c.costs.gamma_rs = v;
        }
        if let Some(v) = self.delta {
            c.chance.delta = v;
        }
        if let Some(v) = self.np_seconds {
            s.prediction.np_seconds = Some(v);
        }
        if let Some(v) = self.horizon_steps {
            c.horizon_steps = v;
        }
        if let Some(v) = self.dt_s {
            c.dt_s = v;
        }
        if let Some(v) = self.n_rollouts {
            c.n_rollouts = v;
        }
        if let Some(v) = self.n_batches {
            c.n_batches = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
    }
}

/// Share of each pedestrian's maximum speed used in the desk corridor.
const DESK_SPEED_FRACTION: f64 = 0.8;
