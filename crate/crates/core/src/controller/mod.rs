//! MPPI and unscented MPPI control loops.
//!
//! One iteration samples perturbation sequences, scores the rollouts they
//! induce, turns the scores into softmax weights and moves the nominal
//! sequence by the weighted perturbation average. The result is smoothed,
//! re-clamped and kept as the warm start for the next iteration.
//!
//! Rollout `m` of an iteration draws its perturbations from its own ChaCha
//! stream (`set_stream(m)`), and the weighted sum runs in rollout order, so
//! plans depend only on the seed and the inputs, never on the worker count.

mod exec;
mod savgol;

use std::str::FromStr;
use std::time::Instant;

use nalgebra::Matrix2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chance::ChanceParams;
use crate::costs::{self, CostParams, ProbCheck, ProbEvaluation, RiskSensitiveGoal};
use crate::dynamics::{advance, Control, ControlLimits, NoiseConfig, RobotState};
use crate::prediction::LayeredObstacles;
use crate::unscented::{self, GaussianBelief, UtParams, UtWeights, N_SIGMA};
use crate::world::Costmap;
use crate::{Error, Result};

pub use exec::Executor;
pub use savgol::{sg_smooth, SavGol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mppi,
    Umppi,
    C2umppi,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mppi, Variant::Umppi, Variant::C2umppi];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mppi => "mppi",
            Variant::Umppi => "umppi",
            Variant::C2umppi => "c2umppi",
        }
    }

    pub fn is_unscented(self) -> bool {
        !matches!(self, Variant::Mppi)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("controller", format!("unknown controller `{s}` (expected mppi, umppi or c2umppi)")))
    }
}

/// How the seven trajectory costs of a sigma batch enter the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchWeighting {
    /// Every trajectory gets its own softmax weight over all `7 M_σ` costs;
    /// a batch moves the nominal by the sum of its seven weights.
    #[default]
    PerTrajectory,
    /// One softmax weight per batch computed from the mean of its costs.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub horizon_steps: usize,
    pub dt_s: f64,
    /// Rollouts per iteration for MPPI.
    pub n_rollouts: usize,
    /// Sigma batches per iteration for the unscented variants.
    pub n_batches: usize,
    pub lambda: f64,
    /// Perturbation covariance, ((m/s)², (rad/s)²).
    pub sigma_u: [[f64; 2]; 2],
    pub limits: ControlLimits,
    pub costs: CostParams,
    pub chance: ChanceParams,
    pub ut: UtParams,
    /// Smoothing window. Horizons shorter than the window use the longest
    /// odd window that fits; smoothing is skipped when that is not above
    /// `sg_order`.
    pub sg_window: usize,
    pub sg_order: usize,
    pub weighting: BatchWeighting,
    /// Rollout threads; 0 uses every core.
    pub workers: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C2umppi,
            horizon_steps: 70,
            dt_s: 0.05,
            n_rollouts: 1024,
            n_batches: 150,
            lambda: 0.5,
            sigma_u: [[0.09, 0.0], [0.0, 0.36]],
            limits: ControlLimits {
                v_min: -0.5,
                v_max: 1.0,
                omega_max: 2.0,
            },
            costs: CostParams::default(),
            chance: ChanceParams::default(),
            ut: UtParams::default(),
            sg_window: 21,
            sg_order: 3,
            weighting: BatchWeighting::PerTrajectory,
            workers: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| e.scoped("controller"))
    }

    fn check(&self) -> Result<()> {
        if self.horizon_steps < 2 {
            return Err(Error::config("horizon_steps", "horizon must be at least 2 steps"));
        }
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(Error::config("dt_s", "time step must be positive"));
        }
        if self.n_rollouts < 2 {
            return Err(Error::config("n_rollouts", "need at least 2 rollouts"));
        }
        if self.n_batches < 2 {
            return Err(Error::config("n_batches", "need at least 2 batches"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "temperature must be positive"));
        }
        self.noise()?;
        self.limits.validate()?;
        self.costs.validate()?;
        self.chance.validate()?;
        self.ut.validate()?;
        savgol::validate(self.sg_window, self.sg_order)?;
        Ok(())
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        NoiseConfig::new(Matrix2::new(
            self.sigma_u[0][0],
            self.sigma_u[0][1],
            self.sigma_u[1][0],
            self.sigma_u[1][1],
        ))
    }

    /// Rollouts scored per iteration: `M`, or `7 M_σ` for the unscented
    /// variants.
    pub fn trajectories(&self) -> usize {
        if self.variant.is_unscented() {
            N_SIGMA * self.n_batches
        } else {
            self.n_rollouts
        }
    }
}

/// Read-only snapshot of the world seen by one iteration.
#[derive(Debug, Clone, Copy)]
pub struct WorldInputs<'a> {
    pub layers: &'a LayeredObstacles,
    pub costmap: &'a Costmap,
    pub goal: RobotState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub min_cost: f64,
    pub mean_cost: f64,
    /// `1 / Σ w²` over the softmax weights.
    pub effective_sample_size: f64,
    /// Obstacle checks in which the chance threshold was non-positive.
    pub kappa_vacuous: usize,
    /// Batch steps whose risk-sensitive goal cost hit the ceiling.
    pub rs_saturated: usize,
    /// No rollout had a finite cost and the braking plan was returned.
    pub fallback: bool,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    pub nominal: Vec<Control>,
    pub applied: Control,
    pub diagnostics: Diagnostics,
}

/// Validated configuration plus everything derived from it once: the noise
/// factor, the UT weights, the smoothing rows and the worker pool.
#[derive(Debug, Clone)]
pub struct Engine {
    config: ControllerConfig,
    noise: NoiseConfig,
    ut_weights: UtWeights,
    savgol: Option<SavGol>,
    exec: Executor,
    q: nalgebra::Matrix3<f64>,
    q_terminal: nalgebra::Matrix3<f64>,
    r: Matrix2<f64>,
}

impl Engine {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.horizon_steps;
        let window = config.sg_window.min(if n % 2 == 1 { n } else { n - 1 });
        let savgol = if window > config.sg_order {
            Some(SavGol::new(n, window, config.sg_order)?)
        } else {
            None
        };
        Ok(Self {
            noise: config.noise()?,
            ut_weights: unscented::ut_weights(&config.ut)?,
            savgol,
            exec: Executor::new(config.workers)?,
            q: config.costs.q(),
            q_terminal: config.costs.q_terminal(),
            r: config.costs.r(),
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn workers(&self) -> usize {
        self.exec.workers()
    }

    /// Perturbation sequence of rollout `index` for the iteration seeded
    /// with `seed`.
    pub fn perturbations(&self, seed: u64, index: usize) -> Vec<Control> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        crate::dynamics::sample_perturbations(&mut rng, &self.noise, self.config.horizon_steps)
    }

    /// Cost-to-go of one deterministic rollout and the perturbations after
    /// clamping, `clamp(u + δu) - u`.
    pub fn rollout_cost(
        &self,
        state: &RobotState,
        nominal: &[Control],
        perturbations: &[Control],
        inputs: &WorldInputs,
    ) -> (f64, Vec<Control>) {
        let c = &self.config;
        let p = &c.costs;
        let r_robot = c.chance.robot_radius;
        let mut x = *state;
        let mut cost = 0.0;
        let mut applied = Vec::with_capacity(nominal.len());
        for (k, (u, du)) in nominal.iter().zip(perturbations).enumerate() {
            let uc = c.limits.clamp(*u + *du);
            let du = uc - *u;
            let pos = x.position();
            let layer = inputs.layers.layer(k);
            cost += costs::q_goal_quadratic(&x, &inputs.goal, &self.q)
                + costs::q_static(&x, inputs.costmap, p.w_stc, r_robot)
                + costs::q_exp(&pos, layer, p.w_exp, p.alpha_exp, p.r_safe)
                + costs::q_rep(&pos, layer, p.w_rep, p.gamma_rep)
                + costs::control_cost(*u, du, &self.r, p.nu);
            applied.push(du);
            x = advance(&x, uc, c.dt_s);
        }
        cost += costs::terminal_cost(&x, &inputs.goal, &self.q_terminal);
        (sanitize(cost), applied)
    }

    /// Costs of the seven sigma trajectories of one batch driven by a shared
    /// perturbation sequence.
    pub fn batch_costs(
        &self,
        belief: &GaussianBelief,
        nominal: &[Control],
        perturbations: &[Control],
        inputs: &WorldInputs,
    ) -> Result<BatchEval> {
        let c = &self.config;
        let p = &c.costs;
        let r_robot = c.chance.robot_radius;
        let prob = c.variant == Variant::C2umppi;
        let mut b = *belief;
        let mut out = BatchEval {
            costs: [0.0; N_SIGMA],
            perturbations: Vec::with_capacity(nominal.len()),
            kappa_vacuous: 0,
            rs_saturated: 0,
        };
        let mut points = [b.mean; N_SIGMA];
        for (k, (u, du)) in nominal.iter().zip(perturbations).enumerate() {
            let uc = c.limits.clamp(*u + *du);
            let du = uc - *u;
            let set = unscented::sigma_points_with(&b, &self.ut_weights)?;
            let rs = RiskSensitiveGoal::new(&self.q, &b.cov, p.gamma_rs, p.rs_ceiling);
            if rs.is_saturated() {
                out.rs_saturated += 1;
            }
            let layer = inputs.layers.layer(k);
            let shared = costs::control_cost(*u, du, &self.r, p.nu);
            let check = if prob && !layer.is_empty() {
                let check = ProbCheck::new(layer, &b.position_cov(), &c.chance)?;
                out.kappa_vacuous += check.vacuous;
                Some(check)
            } else {
                None
            };
            let mean_hits = match (&check, p.prob_evaluation) {
                (Some(ch), ProbEvaluation::BatchMean) => Some(ch.violations(&unscented::mean_position(&set))),
                _ => None,
            };
            for (cost, x) in out.costs.iter_mut().zip(&set.points) {
                let pos = x.position();
                let dynamic = match &check {
                    Some(ch) => p.w_prob * mean_hits.unwrap_or_else(|| ch.violations(&pos)) as f64,
                    None if prob => 0.0,
                    None => {
                        costs::q_exp(&pos, layer, p.w_exp, p.alpha_exp, p.r_safe)
                            + costs::q_rep(&pos, layer, p.w_rep, p.gamma_rep)
                    }
                };
                *cost += rs.eval(x, &inputs.goal).value
                    + costs::q_static(x, inputs.costmap, p.w_stc, r_robot)
                    + dynamic
                    + shared;
            }
            out.perturbations.push(du);
            let next = unscented::propagate_batch(&set, *u, du, &c.limits, c.dt_s);
            points = next.points;
            b = unscented::recover(&next);
        }
        for (cost, x) in out.costs.iter_mut().zip(&points) {
            *cost = sanitize(*cost + costs::terminal_cost(x, &inputs.goal, &self.q_terminal));
        }
        Ok(out)
    }

    fn smooth(&self, u: Vec<Control>) -> Vec<Control> {
        match &self.savgol {
            Some(f) => f
                .apply_controls(&u)
                .into_iter()
                .map(|c| self.config.limits.clamp(c))
                .collect(),
            None => u,
        }
    }

    fn check_inputs(&self, warm: &[Control], inputs: &WorldInputs) -> Result<()> {
        if warm.len() != self.config.horizon_steps {
            return Err(Error::Domain(format!(
                "warm start has {} steps, horizon is {}",
                warm.len(),
                self.config.horizon_steps
            )));
        }
        if !inputs.goal.is_finite() {
            return Err(Error::Domain("goal is not finite".into()));
        }
        Ok(())
    }

    fn finish(&self, warm: &[Control], weights: &[f64], perturbations: &[Vec<Control>], costs: &[f64], start: Instant, diag: Diagnostics) -> ControlPlan {
        let updated = update_controls(warm, perturbations, weights, &self.config.limits);
        let nominal = self.smooth(updated);
        let finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
        let diagnostics = Diagnostics {
            min_cost: finite.iter().copied().fold(f64::INFINITY, f64::min),
            mean_cost: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
            effective_sample_size: 1.0 / weights.iter().map(|w| w * w).sum::<f64>(),
            elapsed_us: start.elapsed().as_micros() as u64,
            ..diag
        };
        ControlPlan {
            applied: nominal[0],
            nominal,
            diagnostics,
        }
    }

    fn braking(&self, start: Instant, diag: Diagnostics) -> ControlPlan {
        log::warn!("no rollout has a finite cost; braking");
        let nominal = vec![self.config.limits.clamp(Control::ZERO); self.config.horizon_steps];
        ControlPlan {
            applied: nominal[0],
            nominal,
            diagnostics: Diagnostics {
                min_cost: f64::INFINITY,
                mean_cost: f64::INFINITY,
                fallback: true,
                elapsed_us: start.elapsed().as_micros() as u64,
                ..diag
            },
        }
    }
}

/// Scores of one sigma batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub costs: [f64; N_SIGMA],
    /// Shared perturbations after clamping.
    pub perturbations: Vec<Control>,
    pub kappa_vacuous: usize,
    pub rs_saturated: usize,
}

/// NaN costs are treated as infinitely bad.
#[inline]
fn sanitize(c: f64) -> f64 {
    if c.is_nan() {
        f64::INFINITY
    } else {
        c
    }
}

/// Softmax of `-S / lambda` with the minimum subtracted first. Fails when
/// no cost is finite.
pub fn weights_from_costs(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let min = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Numerical("every rollout cost is infinite".into()));
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|c| if c.is_finite() { (-(c - min) / lambda).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    Ok(w)
}

/// `u_k + Σ_m w_m δu_{k,m}`, clamped. The sum runs in sample order.
pub fn update_controls(
    nominal: &[Control],
    perturbations: &[Vec<Control>],
    weights: &[f64],
    limits: &ControlLimits,
) -> Vec<Control> {
    let mut out = nominal.to_vec();
    for (du, w) in perturbations.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        for (u, d) in out.iter_mut().zip(du) {
            u.v += w * d.v;
            u.omega += w * d.omega;
        }
    }
    out.into_iter().map(|u| limits.clamp(u)).collect()
}

/// Shifts the sequence one step forward and repeats the last control.
pub fn shift_warm_start(u: &[Control]) -> Vec<Control> {
    match u.split_first() {
        Some((_, rest)) if !rest.is_empty() => {
            let mut out = rest.to_vec();
            out.push(*rest.last().unwrap());
            out
        }
        _ => u.to_vec(),
    }
}

/// One MPPI iteration around the warm start `warm`.
pub fn mppi_step(engine: &Engine, state: &RobotState, warm: &[Control], inputs: &WorldInputs, seed: u64) -> Result<ControlPlan> {
    let start = Instant::now();
    if engine.config.variant != Variant::Mppi {
        return Err(Error::config("controller.variant", "mppi_step needs the mppi variant"));
    }
    if !state.is_finite() {
        return Err(Error::Domain("robot state is not finite".into()));
    }
    engine.check_inputs(warm, inputs)?;
    let results = engine.exec.map(engine.config.n_rollouts, |m| {
        let du = engine.perturbations(seed, m);
        engine.rollout_cost(state, warm, &du, inputs)
    });
    let (costs, perturbations): (Vec<f64>, Vec<Vec<Control>>) = results.into_iter().unzip();
    let diag = Diagnostics::default();
    match weights_from_costs(&costs, engine.config.lambda) {
        Ok(w) => Ok(engine.finish(warm, &w, &perturbations, &costs, start, diag)),
        Err(_) => Ok(engine.braking(start, diag)),
    }
}

/// One unscented iteration from the belief `belief`.
pub fn umppi_step(engine: &Engine, belief: &GaussianBelief, warm: &[Control], inputs: &WorldInputs, seed: u64) -> Result<ControlPlan> {
    let start = Instant::now();
    if !engine.config.variant.is_unscented() {
        return Err(Error::config("controller.variant", "umppi_step needs an unscented variant"));
    }
    belief.validate()?;
    engine.check_inputs(warm, inputs)?;
    let batches = engine
        .exec
        .map(engine.config.n_batches, |m| {
            let du = engine.perturbations(seed, m);
            engine.batch_costs(belief, warm, &du, inputs)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let diag = Diagnostics {
        kappa_vacuous: batches.iter().map(|b| b.kappa_vacuous).sum(),
        rs_saturated: batches.iter().map(|b| b.rs_saturated).sum(),
        ..Diagnostics::default()
    };
    if diag.kappa_vacuous > 0 {
        log::debug!("{} chance checks had a vacuous threshold", diag.kappa_vacuous);
    }
    let all_costs: Vec<f64> = batches.iter().flat_map(|b| b.costs).collect();
    let weights = match engine.config.weighting {
        BatchWeighting::PerTrajectory => weights_from_costs(&all_costs, engine.config.lambda)
            .map(|w| w.chunks(N_SIGMA).map(|c| c.iter().sum()).collect::<Vec<f64>>()),
        BatchWeighting::BatchMean => {
            let means: Vec<f64> = batches
                .iter()
                .map(|b| b.costs.iter().sum::<f64>() / N_SIGMA as f64)
                .collect();
            weights_from_costs(&means, engine.config.lambda)
        }
    };
    let perturbations: Vec<Vec<Control>> = batches.into_iter().map(|b| b.perturbations).collect();
    match weights {
        Ok(w) => Ok(engine.finish(warm, &w, &perturbations, &all_costs, start, diag)),
        Err(_) => Ok(engine.braking(start, diag)),
    }
}

/// Stateful controller: owns the warm start and derives one seed per
/// iteration from its master seed.
#[derive(Debug, Clone)]
pub struct Controller {
    engine: Engine,
    nominal: Vec<Control>,
    seed: u64,
    iteration: u64,
}

impl Controller {
    pub fn new(config: ControllerConfig, seed: u64) -> Result<Self> {
        let engine = Engine::new(config)?;
        let nominal = vec![Control::ZERO; engine.config.horizon_steps];
        Ok(Self {
            engine,
            nominal,
            seed,
            iteration: 0,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.engine.config
    }

    /// Current warm start.
    pub fn nominal(&self) -> &[Control] {
        &self.nominal
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Seed of iteration `iteration`.
    pub fn iteration_seed(&self, iteration: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        rng.next_u64()
    }

    /// Plans from `belief` (MPPI uses its mean) and shifts the result into
    /// the warm start.
    pub fn step(&mut self, belief: &GaussianBelief, inputs: &WorldInputs) -> Result<ControlPlan> {
        let seed = self.iteration_seed(self.iteration);
        let plan = if self.engine.config.variant.is_unscented() {
            umppi_step(&self.engine, belief, &self.nominal, inputs, seed)?
        } else {
            mppi_step(&self.engine, &belief.mean, &self.nominal, inputs, seed)?
        };
        self.nominal = shift_warm_start(&plan.nominal);
        self.iteration += 1;
        Ok(plan)
    }

    pub fn reset(&mut self) {
        self.nominal.fill(Control::ZERO);
        self.iteration = 0;
    }
}
