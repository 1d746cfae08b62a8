//! Trajectory-quality metrics of a run and their aggregation over trials.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Control, RobotState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_s: f64,
    pub pose: RobotState,
    /// Realized velocity.
    pub velocity: Control,
    pub command: Control,
    pub min_ped_dist_m: Option<f64>,
    /// Collision intervals opened during this step.
    pub collisions_opened: usize,
    pub t_exec_us: u64,
}

impl StepRecord {
    pub fn speed(&self) -> f64 {
        self.velocity.v.abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn validate(&self) -> Result<()> {
        if self.records.len() < 2 {
            return Err(Error::Domain(format!(
                "a run log needs at least 2 records, got {}",
                self.records.len()
            )));
        }
        if let Some(w) = self.records.windows(2).find(|w| !(w[1].t_s > w[0].t_s)) {
            return Err(Error::Domain(format!(
                "log times must increase strictly ({} then {})",
                w[0].t_s, w[1].t_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Collision intervals opened.
    pub n_c: usize,
    pub e_dyn: f64,
    /// Mean absolute jerk of the speed profile, m/s³.
    pub j_acc: f64,
    /// `j_acc` scaled by ten, for reporting.
    pub j_acc_x10: f64,
    pub v_av: f64,
    pub d_av: f64,
    pub t_exec_ms_mean: f64,
    pub t_exec_ms_std: f64,
}

/// Second time derivative of `v` at each sample. Interior samples use the
/// three-point stencil centred on them; the ends reuse the stencil of their
/// neighbour, i.e. one-sided differences.
fn second_derivative(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let at = |i: usize| {
        let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        2.0 * ((v[i + 1] - v[i]) / h2 - (v[i] - v[i - 1]) / h1) / (h1 + h2)
    };
    (0..n).map(|i| at(i.clamp(1, n - 2))).collect()
}

pub fn compute_metrics(log: &RunLog) -> Result<Metrics> {
    log.validate()?;
    let r = &log.records;
    let n = r.len() as f64;
    let speeds: Vec<f64> = r.iter().map(StepRecord::speed).collect();
    let times: Vec<f64> = r.iter().map(|s| s.t_s).collect();

    let v_peak = speeds.iter().copied().fold(0.0, f64::max);
    let e_dyn = if v_peak > 0.0 {
        speeds.iter().map(|v| ((v_peak - v) / v_peak).powi(2)).sum::<f64>() / n
    } else {
        0.0
    };
    let j_acc = second_derivative(&times, &speeds).iter().map(|j| j.abs()).sum::<f64>() / n;
    let d_av = r
        .windows(2)
        .map(|w| (w[1].pose.position() - w[0].pose.position()).norm())
        .sum();
    let exec: Vec<f64> = r.iter().map(|s| s.t_exec_us as f64 / 1e3).collect();
    let exec_stats = MeanStd::of(&exec);
    Ok(Metrics {
        n_c: r.iter().map(|s| s.collisions_opened).sum(),
        e_dyn,
        j_acc,
        j_acc_x10: 10.0 * j_acc,
        v_av: speeds.iter().sum::<f64>() / n,
        d_av,
        t_exec_ms_mean: exec_stats.mean,
        t_exec_ms_std: exec_stats.std,
    })
}

/// Sample mean and `n - 1` standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(x: &[f64]) -> Self {
        if x.is_empty() {
            return Self::default();
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = if x.len() > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    /// Trials that ended in a controller failure; excluded from the means.
    pub failed: usize,
    /// Collision openings per trial.
    pub n_c: MeanStd,
    pub n_c_total: usize,
    pub e_dyn: MeanStd,
    pub j_acc: MeanStd,
    pub j_acc_x10: MeanStd,
    pub v_av: MeanStd,
    pub d_av: MeanStd,
    /// Spread of the per-trial mean iteration times.
    pub t_exec_ms: MeanStd,
}

/// Per-field statistics over successful trials.
pub fn aggregate(trials: &[Metrics], failed: usize) -> Aggregate {
    let field = |f: fn(&Metrics) -> f64| MeanStd::of(&trials.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        trials: trials.len() + failed,
        failed,
        n_c: field(|m| m.n_c as f64),
        n_c_total: trials.iter().map(|m| m.n_c).sum(),
        e_dyn: field(|m| m.e_dyn),
        j_acc: field(|m| m.j_acc),
        j_acc_x10: field(|m| m.j_acc_x10),
        v_av: field(|m| m.v_av),
        d_av: field(|m| m.d_av),
        t_exec_ms: field(|m| m.t_exec_ms_mean),
    }
}
