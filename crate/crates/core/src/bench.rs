//! Wall-time distribution of a single controller iteration on a frozen
//! corridor snapshot.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::controller::{mppi_step, umppi_step, ControlPlan, ControllerConfig, Engine, Variant, WorldInputs};
use crate::dynamics::{Control, RobotState};
use crate::prediction::{build_layers, LayeredObstacles, PedestrianTracker};
use crate::scenario::Scenario;
use crate::unscented::GaussianBelief;
use crate::world::{Costmap, World};
use crate::{Error, Result};

pub const MIN_REPETITIONS: usize = 30;

/// Seconds of pedestrian motion and tracking before the snapshot is taken.
const WARMUP_S: f64 = 3.0;
const SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub controller: Variant,
    pub horizon_steps: usize,
    /// Rollouts for MPPI, sigma batches for the unscented variants.
    pub samples: usize,
    pub workers: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub config_hash: String,
}

/// Inputs of one iteration, fixed across repetitions.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub belief: GaussianBelief,
    pub warm: Vec<Control>,
    pub layers: LayeredObstacles,
    pub costmap: Costmap,
    pub goal: RobotState,
}

impl Snapshot {
    /// Corridor scenario after a few seconds of pedestrian motion, robot at
    /// the start facing the far goal.
    pub fn corridor(cfg: &ControllerConfig) -> Result<Self> {
        let s = Scenario::desk_corridor();
        let dt = cfg.dt_s;
        let robot = s.robot.start.state();
        let mut world = World::new(s.world.clone(), robot)?;
        let mut tracker = PedestrianTracker::new(s.tracker)?;
        let noise = s.tracker.meas_noise_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        for _ in 0..(WARMUP_S / dt).round() as usize {
            tracker.observe(&world.observe_pedestrians(&noise, &mut rng), dt)?;
            world.step(Control::ZERO, dt);
        }
        let np = s.np_seconds(cfg.variant);
        let preds = tracker.predictions_from(np, s.prediction.dt_p_s, s.prediction.start_pos_var_m2);
        let layers = build_layers(&preds, s.prediction.dt_p_s, cfg.horizon_steps, dt, np)?;
        let costmap = world.rasterize_costmap(s.costmap.resolution_m, s.costmap.extent_m)?;
        let [a, b, c] = s.initial_state_var;
        Ok(Self {
            belief: GaussianBelief::new(robot, Matrix3::from_diagonal(&nalgebra::Vector3::new(a, b, c))),
            warm: vec![Control::new(0.5, 0.0); cfg.horizon_steps],
            layers,
            costmap,
            goal: s.goals[0].state(),
        })
    }

    fn inputs(&self) -> WorldInputs<'_> {
        WorldInputs {
            layers: &self.layers,
            costmap: &self.costmap,
            goal: self.goal,
        }
    }
}

/// One iteration from `snap` with a fixed seed.
pub fn plan_once(engine: &Engine, snap: &Snapshot) -> Result<ControlPlan> {
    if engine.config().variant.is_unscented() {
        umppi_step(engine, &snap.belief, &snap.warm, &snap.inputs(), SEED)
    } else {
        mppi_step(engine, &snap.belief.mean, &snap.warm, &snap.inputs(), SEED)
    }
}

/// Desk configuration of `variant` with the given horizon and sample count.
pub fn bench_config(variant: Variant, horizon_steps: usize, samples: usize, workers: usize) -> ControllerConfig {
    ControllerConfig {
        variant,
        horizon_steps,
        n_rollouts: samples,
        n_batches: samples,
        workers,
        ..ControllerConfig::default()
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Times `repetitions` identical iterations after one untimed warm-up.
pub fn bench_config_run(cfg: ControllerConfig, repetitions: usize) -> Result<BenchResult> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::config(
            "repetitions",
            format!("must be at least {MIN_REPETITIONS}, got {repetitions}"),
        ));
    }
    let engine = Engine::new(cfg.clone())?;
    let snap = Snapshot::corridor(&cfg)?;
    plan_once(&engine, &snap)?;
    let mut ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let plan = plan_once(&engine, &snap)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(plan);
    }
    let stats = crate::metrics::MeanStd::of(&ms);
    ms.sort_by(f64::total_cmp);
    let digest = Sha256::digest(serde_json::to_vec(&ControllerConfig { workers: 0, ..cfg.clone() }).expect("config serializes"));
    Ok(BenchResult {
        controller: cfg.variant,
        horizon_steps: cfg.horizon_steps,
        samples: if cfg.variant.is_unscented() { cfg.n_batches } else { cfg.n_rollouts },
        workers: engine.workers(),
        repetitions,
        mean_ms: stats.mean,
        std_ms: stats.std,
        p50_ms: percentile(&ms, 50.0),
        p90_ms: percentile(&ms, 90.0),
        p99_ms: percentile(&ms, 99.0),
        min_ms: ms[0],
        max_ms: ms[ms.len() - 1],
        config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

pub fn bench_controller(
    variant: Variant,
    horizon_steps: usize,
    samples: usize,
    repetitions: usize,
    workers: usize,
) -> Result<BenchResult> {
    bench_config_run(bench_config(variant, horizon_steps, samples, workers), repetitions)
}

/// Appends `result` to a CSV file, writing the header when the file is new
/// or empty.
pub fn append_csv(path: &Path, result: &BenchResult) -> Result<()> {
    let io = |e: std::io::Error| Error::Domain(format!("cannot write {}: {e}", path.display()));
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let fresh = file.metadata().map_err(io)?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(result).map_err(|e| Error::Domain(format!("csv: {e}")))?;
    w.flush().map_err(io)
}
