//! Corridor simulation: scripted pedestrians, static geometry, the
//! robot-centred occupancy grid and collision bookkeeping.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, wrap_angle, Control, RobotState};
use crate::{Error, Result};

/// Axis-aligned bounds of the walkable area, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extents {
    pub x_min_m: f64,
    pub x_max_m: f64,
    pub y_min_m: f64,
    pub y_max_m: f64,
}

impl Extents {
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p[0] >= self.x_min_m && p[0] <= self.x_max_m && p[1] >= self.y_min_m && p[1] <= self.y_max_m
    }
}

/// Static obstacle geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StaticShape {
    Disc { center_m: [f64; 2], radius_m: f64 },
    /// Convex polygon, vertices in either winding order.
    Polygon { vertices_m: Vec<[f64; 2]> },
}

impl StaticShape {
    /// Axis-aligned rectangle as a polygon.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        StaticShape::Polygon {
            vertices_m: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    fn bbox(&self) -> (Vector2<f64>, Vector2<f64>) {
        match self {
            StaticShape::Disc { center_m, radius_m } => {
                let c = Vector2::from(*center_m);
                let r = Vector2::new(*radius_m, *radius_m);
                (c - r, c + r)
            }
            StaticShape::Polygon { vertices_m } => {
                let mut lo = Vector2::repeat(f64::INFINITY);
                let mut hi = Vector2::repeat(f64::NEG_INFINITY);
                for v in vertices_m {
                    lo = lo.inf(&Vector2::from(*v));
                    hi = hi.sup(&Vector2::from(*v));
                }
                (lo, hi)
            }
        }
    }

    /// Closed intersection test against the rectangle `[lo, hi]`.
    fn touches_rect(&self, lo: &Vector2<f64>, hi: &Vector2<f64>) -> bool {
        match self {
            StaticShape::Disc { center_m, radius_m } => {
                let c = Vector2::from(*center_m);
                let q = c.sup(lo).inf(hi);
                (c - q).norm_squared() <= radius_m * radius_m
            }
            StaticShape::Polygon { vertices_m } => {
                let (plo, phi) = self.bbox();
                if plo[0] > hi[0] || phi[0] < lo[0] || plo[1] > hi[1] || phi[1] < lo[1] {
                    return false;
                }
                let corners = [
                    Vector2::new(lo[0], lo[1]),
                    Vector2::new(hi[0], lo[1]),
                    Vector2::new(hi[0], hi[1]),
                    Vector2::new(lo[0], hi[1]),
                ];
                let n = vertices_m.len();
                for i in 0..n {
                    let a = Vector2::from(vertices_m[i]);
                    let b = Vector2::from(vertices_m[(i + 1) % n]);
                    let axis = Vector2::new(b[1] - a[1], a[0] - b[0]);
                    let (pmin, pmax) = project(vertices_m.iter().map(|v| Vector2::from(*v)), &axis);
                    let (rmin, rmax) = project(corners.iter().copied(), &axis);
                    if pmax < rmin || rmax < pmin {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Signed-free distance from `p` to the shape (zero inside).
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        match self {
            StaticShape::Disc { center_m, radius_m } => {
                ((p - Vector2::from(*center_m)).norm() - radius_m).max(0.0)
            }
            StaticShape::Polygon { vertices_m } => {
                let n = vertices_m.len();
                let mut inside = true;
                let mut sign = 0.0;
                let mut best = f64::INFINITY;
                for i in 0..n {
                    let a = Vector2::from(vertices_m[i]);
                    let b = Vector2::from(vertices_m[(i + 1) % n]);
                    let e = b - a;
                    let cross = e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            inside = false;
                        }
                    }
                    let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
                    best = best.min((p - (a + e * t)).norm());
                }
                if inside {
                    0.0
                } else {
                    best
                }
            }
        }
    }
}

fn project(points: impl Iterator<Item = Vector2<f64>>, axis: &Vector2<f64>) -> (f64, f64) {
    points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Robot-centred occupancy grid of static obstacles. The grid is aligned
/// with the world axes and has an odd number of cells per side so that the
/// robot sits in the centre cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    center: Vector2<f64>,
    resolution: f64,
    half: usize,
    cells: Vec<bool>,
    occupied: usize,
}

impl Costmap {
    pub fn empty(center: Vector2<f64>, resolution: f64, extent: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Domain(format!("costmap resolution must be positive, got {resolution}")));
        }
        let half = (0.5 * extent.max(0.0) / resolution).ceil() as usize;
        let side = 2 * half + 1;
        Ok(Self {
            center,
            resolution,
            half,
            cells: vec![false; side * side],
            occupied: 0,
        })
    }

    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn center(&self) -> Vector2<f64> {
        self.center
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.side() + i]
    }

    /// Centre of cell `(i, j)` (column, row) in world coordinates.
    pub fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        let h = self.half as f64;
        self.center + Vector2::new(i as f64 - h, j as f64 - h) * self.resolution
    }

    /// Cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let rel = (p - self.center) / self.resolution + Vector2::repeat(self.half as f64 + 0.5);
        let (i, j) = (rel[0].floor(), rel[1].floor());
        let side = self.side() as f64;
        (i >= 0.0 && j >= 0.0 && i < side && j < side).then_some((i as usize, j as usize))
    }

    fn set(&mut self, i: usize, j: usize) {
        let side = self.side();
        let c = &mut self.cells[j * side + i];
        if !*c {
            *c = true;
            self.occupied += 1;
        }
    }

    /// True when the disc of radius `r` at `p` overlaps an occupied cell.
    /// Space outside the grid counts as free.
    pub fn disc_overlaps(&self, p: &Vector2<f64>, r: f64) -> bool {
        if self.occupied == 0 {
            return false;
        }
        let side = self.side() as isize;
        let h = self.half as f64;
        let res = self.resolution;
        let idx = |v: f64, c: f64| ((v - c) / res + h + 0.5).floor() as isize;
        let i0 = idx(p[0] - r, self.center[0]).max(0);
        let i1 = idx(p[0] + r, self.center[0]).min(side - 1);
        let j0 = idx(p[1] - r, self.center[1]).max(0);
        let j1 = idx(p[1] + r, self.center[1]).min(side - 1);
        let r2 = r * r;
        for j in j0..=j1 {
            for i in i0..=i1 {
                if !self.cells[j as usize * side as usize + i as usize] {
                    continue;
                }
                let c = self.cell_center(i as usize, j as usize);
                let dx = ((p[0] - c[0]).abs() - 0.5 * res).max(0.0);
                let dy = ((p[1] - c[1]).abs() - 0.5 * res).max(0.0);
                if dx * dx + dy * dy < r2 {
                    return true;
                }
            }
        }
        false
    }
}

pub fn rasterize_costmap(
    shapes: &[StaticShape],
    robot: &RobotState,
    resolution: f64,
    extent: f64,
) -> Result<Costmap> {
    let mut map = Costmap::empty(robot.position(), resolution, extent)?;
    let side = map.side();
    let half_cell = Vector2::repeat(0.5 * resolution);
    for shape in shapes {
        let (lo, hi) = shape.bbox();
        let clamp_idx = |v: f64, c: f64| {
            (((v - c) / resolution + map.half as f64 + 0.5).floor()).clamp(0.0, side as f64 - 1.0) as usize
        };
        let (i0, i1) = (clamp_idx(lo[0], map.center[0]), clamp_idx(hi[0], map.center[0]));
        let (j0, j1) = (clamp_idx(lo[1], map.center[1]), clamp_idx(hi[1], map.center[1]));
        for j in j0..=j1 {
            for i in i0..=i1 {
                let c = map.cell_center(i, j);
                if shape.touches_rect(&(c - half_cell), &(c + half_cell)) {
                    map.set(i, j);
                }
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InteractionMode {
    /// Pedestrians ignore the robot.
    Ncm,
    /// Pedestrians add a bounded repulsive steering away from the robot.
    Cm,
}

/// Waypoint script of one pedestrian. The pedestrian walks the polyline at
/// `max_speed_mps * speed_fraction` and turns back at either end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianScript {
    pub waypoints_m: Vec<[f64; 2]>,
    pub max_speed_mps: f64,
    #[serde(default = "one")]
    pub speed_fraction: f64,
    #[serde(default = "default_ped_radius")]
    pub radius_m: f64,
}

fn one() -> f64 {
    1.0
}

fn default_ped_radius() -> f64 {
    0.3
}

impl PedestrianScript {
    pub fn speed(&self) -> f64 {
        self.max_speed_mps * self.speed_fraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub extents: Extents,
    #[serde(default)]
    pub static_obstacles: Vec<StaticShape>,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianScript>,
    pub mode: InteractionMode,
    pub robot_radius_m: f64,
    /// Gain of the cooperative repulsion, m³/s.
    #[serde(default = "default_k_rep")]
    pub cm_repulsion_gain: f64,
}

fn default_k_rep() -> f64 {
    0.5
}

/// Share of the scripted speed the cooperative repulsion may add.
const CM_STEER_CAP: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedestrianState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    pub radius: f64,
    target: usize,
    forward: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionKind {
    Pedestrian(usize),
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub time: f64,
    pub kind: CollisionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub time: f64,
    pub robot: RobotState,
    pub robot_velocity: Control,
    pub pedestrians: Vec<PedestrianState>,
    /// One entry per opened overlap interval.
    pub collisions: Vec<CollisionEvent>,
    ped_overlap: Vec<bool>,
    static_overlap: bool,
}

impl WorldState {
    /// True while any collision interval is open.
    pub fn in_collision(&self) -> bool {
        self.static_overlap || self.ped_overlap.iter().any(|o| *o)
    }
}

/// Scripted world advanced in lock-step with the controller.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    state: WorldState,
}

impl World {
    pub fn new(config: WorldConfig, robot: RobotState) -> Result<Self> {
        for (i, p) in config.pedestrians.iter().enumerate() {
            if p.waypoints_m.is_empty() {
                return Err(Error::config(format!("pedestrians[{i}].waypoints_m"), "needs at least one waypoint"));
            }
            if !(p.speed_fraction > 0.0 && p.speed_fraction <= 1.0) {
                return Err(Error::config(format!("pedestrians[{i}].speed_fraction"), "must lie in (0, 1]"));
            }
            if !(p.radius_m > 0.0) {
                return Err(Error::config(format!("pedestrians[{i}].radius_m"), "must be positive"));
            }
        }
        let pedestrians = config
            .pedestrians
            .iter()
            .map(|p| PedestrianState {
                position: Vector2::from(p.waypoints_m[0]),
                velocity: Vector2::zeros(),
                radius: p.radius_m,
                target: 1.min(p.waypoints_m.len() - 1),
                forward: true,
            })
            .collect::<Vec<_>>();
        let n = pedestrians.len();
        let mut world = Self {
            config,
            state: WorldState {
                time: 0.0,
                robot,
                robot_velocity: Control::ZERO,
                pedestrians,
                collisions: Vec::new(),
                ped_overlap: vec![false; n],
                static_overlap: false,
            },
        };
        world.check_collisions();
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Moves the robot under `command`, then the pedestrians, then records
    /// newly opened collisions. Returns the number of openings.
    pub fn step(&mut self, command: Control, dt: f64) -> usize {
        let robot_before = self.state.robot.position();
        self.state.robot = advance(&self.state.robot, command, dt);
        self.state.robot_velocity = command;
        let cm = self.config.mode == InteractionMode::Cm;
        let k_rep = self.config.cm_repulsion_gain;
        let ext = self.config.extents;
        for (ped, script) in self.state.pedestrians.iter_mut().zip(&self.config.pedestrians) {
            let start = ped.position;
            walk_script(ped, script, dt);
            if cm {
                let away = ped.position - robot_before;
                let d = away.norm();
                if d > 1e-9 {
                    let mag = (k_rep / (d * d)).min(CM_STEER_CAP * script.speed());
                    ped.position += away / d * mag * dt;
                }
            }
            // Walls reflect: positions are folded back inside the extents.
            for (axis, (lo, hi)) in [(0, (ext.x_min_m, ext.x_max_m)), (1, (ext.y_min_m, ext.y_max_m))] {
                if ped.position[axis] < lo {
                    ped.position[axis] = (2.0 * lo - ped.position[axis]).min(hi);
                } else if ped.position[axis] > hi {
                    ped.position[axis] = (2.0 * hi - ped.position[axis]).max(lo);
                }
            }
            ped.velocity = (ped.position - start) / dt;
        }
        self.state.time += dt;
        self.check_collisions()
    }

    fn check_collisions(&mut self) -> usize {
        let p = self.state.robot.position();
        let r = self.config.robot_radius_m;
        let mut opened = 0;
        for (i, ped) in self.state.pedestrians.iter().enumerate() {
            let overlap = (ped.position - p).norm() < r + ped.radius;
            if overlap && !self.state.ped_overlap[i] {
                self.state.collisions.push(CollisionEvent {
                    time: self.state.time,
                    kind: CollisionKind::Pedestrian(i),
                });
                opened += 1;
            }
            self.state.ped_overlap[i] = overlap;
        }
        let hit_static = self.config.static_obstacles.iter().any(|s| s.distance(&p) < r);
        if hit_static && !self.state.static_overlap {
            self.state.collisions.push(CollisionEvent {
                time: self.state.time,
                kind: CollisionKind::Static,
            });
            opened += 1;
        }
        self.state.static_overlap = hit_static;
        opened
    }

    /// Distance from the robot centre to the nearest pedestrian centre.
    pub fn min_pedestrian_distance(&self) -> Option<f64> {
        let p = self.state.robot.position();
        self.state
            .pedestrians
            .iter()
            .map(|q| (q.position - p).norm())
            .min_by(f64::total_cmp)
    }

    /// Noisy position measurements, one per pedestrian, paired with the
    /// pedestrian radius.
    pub fn observe_pedestrians<R: Rng + ?Sized>(
        &self,
        meas_noise: &Matrix2<f64>,
        rng: &mut R,
    ) -> Vec<(Vector2<f64>, f64)> {
        observe_pedestrians(&self.state, meas_noise, rng)
    }

    pub fn rasterize_costmap(&self, resolution: f64, extent: f64) -> Result<Costmap> {
        rasterize_costmap(&self.config.static_obstacles, &self.state.robot, resolution, extent)
    }
}

pub fn observe_pedestrians<R: Rng + ?Sized>(
    state: &WorldState,
    meas_noise: &Matrix2<f64>,
    rng: &mut R,
) -> Vec<(Vector2<f64>, f64)> {
    let factor = meas_noise.cholesky().map(|c| c.l()).unwrap_or_else(Matrix2::zeros);
    state
        .pedestrians
        .iter()
        .map(|p| {
            let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            (p.position + factor * z, p.radius)
        })
        .collect()
}

fn walk_script(ped: &mut PedestrianState, script: &PedestrianScript, dt: f64) {
    let n = script.waypoints_m.len();
    if n < 2 {
        return;
    }
    let mut budget = script.speed() * dt;
    // Bounded: each pass either exhausts the budget or reaches a waypoint.
    for _ in 0..2 * n + 2 {
        let target = Vector2::from(script.waypoints_m[ped.target]);
        let gap = target - ped.position;
        let d = gap.norm();
        if d > budget {
            ped.position += gap / d * budget;
            return;
        }
        ped.position = target;
        budget -= d;
        if ped.forward && ped.target + 1 == n {
            ped.forward = false;
        } else if !ped.forward && ped.target == 0 {
            ped.forward = true;
        }
        ped.target = if ped.forward { ped.target + 1 } else { ped.target - 1 };
        if budget <= 0.0 {
            return;
        }
    }
}

/// Sequential goal tracking with position and heading tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalManager {
    goals: Vec<RobotState>,
    index: usize,
    pos_tol: f64,
    heading_tol: f64,
}

impl GoalManager {
    pub fn new(goals: Vec<RobotState>, pos_tol: f64, heading_tol: f64) -> Result<Self> {
        if goals.is_empty() {
            return Err(Error::Domain("goal list is empty".into()));
        }
        Ok(Self {
            goals,
            index: 0,
            pos_tol,
            heading_tol,
        })
    }

    pub fn current(&self) -> RobotState {
        self.goals[self.index.min(self.goals.len() - 1)]
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn is_complete(&self) -> bool {
        self.index >= self.goals.len()
    }

    /// Advances past every goal the robot currently satisfies and returns
    /// the active goal together with the completion flag.
    pub fn update(&mut self, robot: &RobotState) -> (RobotState, bool) {
        while !self.is_complete() {
            let g = self.goals[self.index];
            let close = (robot.position() - g.position()).norm() <= self.pos_tol;
            let aligned = wrap_angle(robot.theta - g.theta).abs() <= self.heading_tol;
            if close && aligned {
                self.index += 1;
            } else {
                break;
            }
        }
        (self.current(), self.is_complete())
    }
}
