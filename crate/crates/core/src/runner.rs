//! Closed-loop trials: world, tracker and controller stepped together, with
//! trajectory CSV and metrics JSON output.

use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::controller::{Controller, Variant, WorldInputs};
use crate::metrics::{aggregate, compute_metrics, Aggregate, Metrics, RunLog, StepRecord};
use crate::prediction::{build_layers, LayeredObstacles, PedestrianTracker};
use crate::scenario::Scenario;
use crate::unscented::GaussianBelief;
use crate::world::{GoalManager, World};
use crate::{Error, Result};

/// Stream of the observation noise generator. Controller iterations use
/// the low stream numbers of the same seed.
const OBSERVATION_STREAM: u64 = 1 << 63;

pub const CSV_HEADER: [&str; 11] = [
    "t_s",
    "x_m",
    "y_m",
    "theta_rad",
    "v_mps",
    "omega_radps",
    "cmd_v_mps",
    "cmd_omega_radps",
    "min_ped_dist_m",
    "collision_open_flag",
    "t_exec_us",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Record controller wall times. Off writes zeros so that outputs are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { timing: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub log: RunLog,
    /// Every goal was reached before the time limit.
    pub completed: bool,
    pub goals_reached: usize,
    /// Controller or numerical failure that ended the trial.
    pub failure: Option<String>,
}

impl TrialOutcome {
    pub fn metrics(&self) -> Option<Metrics> {
        if self.failure.is_some() {
            return None;
        }
        compute_metrics(&self.log).ok()
    }

    pub fn collisions(&self) -> usize {
        self.log.records.iter().map(|r| r.collisions_opened).sum()
    }
}

/// SHA-256 over the resolved scenario. The worker count is left out since
/// it does not change results.
pub fn config_hash(scenario: &Scenario) -> String {
    let mut s = scenario.clone();
    s.controller.workers = 0;
    let digest = Sha256::digest(serde_json::to_vec(&s).expect("scenario serializes"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn initial_belief(scenario: &Scenario, pose: crate::dynamics::RobotState) -> GaussianBelief {
    let [a, b, c] = scenario.initial_state_var;
    GaussianBelief::new(pose, Matrix3::from_diagonal(&nalgebra::Vector3::new(a, b, c)))
}

/// Runs one trial with master seed `seed`. Controller failures end the
/// trial and are reported in the outcome rather than as an error; setup
/// problems (an invalid configuration) are errors.
pub fn run_trial(scenario: &Scenario, trial: usize, seed: u64, opts: RunOptions) -> Result<TrialOutcome> {
    let cfg = &scenario.controller;
    let dt = cfg.dt_s;
    let variant = cfg.variant;
    let np = scenario.np_seconds(variant);
    let dt_p = scenario.prediction.dt_p_s;
    let mut world = World::new(scenario.world.clone(), scenario.robot.start.state())?;
    let mut goals = GoalManager::new(
        scenario.goals.iter().map(|g| g.state()).collect(),
        scenario.goal_tolerance.position_m,
        scenario.goal_tolerance.heading_rad,
    )?;
    let mut tracker = PedestrianTracker::new(scenario.tracker)?;
    let meas_noise = scenario.tracker.meas_noise_matrix();
    let mut controller = Controller::new(cfg.clone(), seed)?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(seed);
    obs_rng.set_stream(OBSERVATION_STREAM);

    let steps = (scenario.duration_s / dt).round() as usize;
    let mut records = Vec::with_capacity(steps);
    let mut failure = None;
    let mut completed = false;
    for _ in 0..steps {
        let robot = world.state().robot;
        let (goal, done) = goals.update(&robot);
        if done {
            completed = true;
            break;
        }
        let measurements = world.observe_pedestrians(&meas_noise, &mut obs_rng);
        let planned = tracker.observe(&measurements, dt).and_then(|_| {
            let predictions = tracker.predictions_from(np, dt_p, scenario.prediction.start_pos_var_m2);
            let layers = if predictions.is_empty() {
                LayeredObstacles::empty(cfg.horizon_steps, dt)
            } else {
                build_layers(&predictions, dt_p, cfg.horizon_steps, dt, np)?
            };
            let costmap = world.rasterize_costmap(scenario.costmap.resolution_m, scenario.costmap.extent_m)?;
            let inputs = WorldInputs {
                layers: &layers,
                costmap: &costmap,
                goal,
            };
            controller.step(&initial_belief(scenario, robot), &inputs)
        });
        let plan = match planned {
            Ok(p) => p,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let opened = world.step(plan.applied, dt);
        let state = world.state();
        records.push(StepRecord {
            t_s: state.time,
            pose: state.robot,
            velocity: state.robot_velocity,
            command: plan.applied,
            min_ped_dist_m: world.min_pedestrian_distance(),
            collisions_opened: opened,
            t_exec_us: if opts.timing { plan.diagnostics.elapsed_us } else { 0 },
        });
    }
    if !completed && failure.is_none() {
        completed = goals.update(&world.state().robot).1;
    }
    if failure.is_none() && records.len() < 2 {
        failure = Some(format!("trial ended after {} steps, too short to evaluate", records.len()));
    }
    Ok(TrialOutcome {
        trial,
        seed,
        log: RunLog { records },
        completed,
        goals_reached: goals.index(),
        failure,
    })
}

/// Trajectory CSV in the documented column order. Distances are empty when
/// the world has no pedestrians.
pub fn trajectory_csv(log: &RunLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &log.records {
        let dist = r.min_ped_dist_m.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([
            r.t_s.to_string(),
            r.pose.x.to_string(),
            r.pose.y.to_string(),
            r.pose.theta.to_string(),
            r.velocity.v.to_string(),
            r.velocity.omega.to_string(),
            r.command.v.to_string(),
            r.command.omega.to_string(),
            dist,
            r.collisions_opened.to_string(),
            r.t_exec_us.to_string(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialReport<'a> {
    pub scenario: &'a str,
    pub controller: Variant,
    pub trial: usize,
    pub seed: u64,
    pub config_hash: &'a str,
    pub completed: bool,
    pub goals_reached: usize,
    pub steps: usize,
    pub failure: Option<&'a str>,
    #[serde(flatten)]
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport<'a> {
    pub scenario: &'a str,
    pub controller: Variant,
    pub seed: u64,
    pub config_hash: &'a str,
    pub completed: usize,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub outcomes: Vec<TrialOutcome>,
    pub aggregate: Aggregate,
    pub config_hash: String,
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| e.error)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// Runs `trials` trials with seeds `scenario.seed + i` and, when `out` is
/// given, writes `trajectory_NNN.csv` and `metrics_NNN.json` per trial and
/// `aggregate.json`. The caller validates the scenario first.
pub fn run_trials(scenario: &Scenario, trials: usize, out: Option<&Path>, opts: RunOptions) -> Result<RunSummary> {
    if trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    let hash = config_hash(scenario);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Domain(format!("cannot create {}: {e}", dir.display())))?;
    }
    let io = |e: std::io::Error| Error::Domain(format!("write failed: {e}"));
    let mut outcomes = Vec::with_capacity(trials);
    for i in 0..trials {
        let seed = scenario.seed.wrapping_add(i as u64);
        let outcome = run_trial(scenario, i, seed, opts)?;
        match &outcome.failure {
            Some(f) => log::warn!("trial {i} (seed {seed}) failed: {f}"),
            None => log::info!(
                "trial {i} (seed {seed}): {} steps, {} collisions, completed {}",
                outcome.log.records.len(),
                outcome.collisions(),
                outcome.completed
            ),
        }
        if let Some(dir) = out {
            let report = TrialReport {
                scenario: &scenario.name,
                controller: scenario.controller.variant,
                trial: i,
                seed,
                config_hash: &hash,
                completed: outcome.completed,
                goals_reached: outcome.goals_reached,
                steps: outcome.log.records.len(),
                failure: outcome.failure.as_deref(),
                metrics: outcome.metrics(),
            };
            write_atomic(dir, &format!("trajectory_{i:03}.csv"), &trajectory_csv(&outcome.log)?).map_err(io)?;
            write_atomic(dir, &format!("metrics_{i:03}.json"), &to_json(&report)).map_err(io)?;
        }
        outcomes.push(outcome);
    }
    let ok: Vec<Metrics> = outcomes.iter().filter_map(TrialOutcome::metrics).collect();
    let agg = aggregate(&ok, trials - ok.len());
    if let Some(dir) = out {
        let report = AggregateReport {
            scenario: &scenario.name,
            controller: scenario.controller.variant,
            seed: scenario.seed,
            config_hash: &hash,
            completed: outcomes.iter().filter(|o| o.completed).count(),
            aggregate: agg,
        };
        write_atomic(dir, "aggregate.json", &to_json(&report)).map_err(io)?;
    }
    Ok(RunSummary {
        outcomes,
        aggregate: agg,
        config_hash: hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerConfig;
    use crate::scenario::Scenario;

    fn small(variant: Variant) -> Scenario {
        let mut s = Scenario::empty_world();
        s.duration_s = 1.0;
        s.controller = ControllerConfig {
            variant,
            horizon_steps: 20,
            n_rollouts: 64,
            n_batches: 10,
            workers: 1,
            ..ControllerConfig::default()
        };
        s
    }

    #[test]
    fn short_trial_moves_toward_goal() {
        let s = small(Variant::Mppi);
        let out = run_trial(&s, 0, 3, RunOptions { timing: false }).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.log.records.len(), 20);
        let last = out.log.records.last().unwrap();
        assert!(last.pose.x > s.robot.start.x_m + 0.1, "x = {}", last.pose.x);
        assert!(out.log.records.iter().all(|r| s.controller.limits.contains(r.command)));
    }

    #[test]
    fn csv_layout() {
        let s = small(Variant::Umppi);
        let out = run_trial(&s, 0, 1, RunOptions { timing: false }).unwrap();
        let text = String::from_utf8(trajectory_csv(&out.log).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 11);
        assert_eq!(row[8], "");
        assert_eq!(row[10], "0");
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn repeat_runs_are_identical() {
        let mut s = small(Variant::C2umppi);
        s.world = Scenario::desk_corridor().world;
        s.robot.start = crate::scenario::Pose::new(3.0, 0.0, 0.0);
        s.goals = vec![crate::scenario::Pose::new(8.0, 0.0, 0.0)];
        let opts = RunOptions { timing: false };
        let a = run_trial(&s, 0, 9, opts).unwrap();
        let b = run_trial(&s, 0, 9, opts).unwrap();
        assert_eq!(trajectory_csv(&a.log).unwrap(), trajectory_csv(&b.log).unwrap());
        assert!(a.log.records[0].min_ped_dist_m.is_some());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = small(Variant::Mppi);
        let sum = run_trials(&s, 2, Some(dir.path()), RunOptions { timing: false }).unwrap();
        assert_eq!(sum.aggregate.trials, 2);
        for f in ["trajectory_000.csv", "trajectory_001.csv", "metrics_000.json", "metrics_001.json", "aggregate.json"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("metrics_001.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 1);
        assert_eq!(m["config_hash"], sum.config_hash.as_str());
        assert!(m["e_dyn"].is_number());
    }

    #[test]
    fn hash_ignores_workers_only() {
        let s = small(Variant::Mppi);
        let mut t = s.clone();
        t.controller.workers = 8;
        assert_eq!(config_hash(&s), config_hash(&t));
        t.controller.lambda = 0.7;
        assert_ne!(config_hash(&s), config_hash(&t));
    }
}
