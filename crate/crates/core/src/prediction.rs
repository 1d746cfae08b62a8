//! Constant-velocity Kalman tracking of pedestrians and the layered
//! obstacle representation read by the rollouts.
//!
//! A track's state is `[x, y, vx, vy]`. Acceleration is white noise with
//! diagonal covariance, injected through `G = [dt²/2 I; dt I]`. Predictions
//! are made at their own time step and resampled by linear interpolation
//! onto the controller grid, so rollout step `k` reads layer `k` only.

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const COV_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedestrianTrack {
    pub id: usize,
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub radius: f64,
}

impl PedestrianTrack {
    pub fn new(id: usize, mean: Vector4<f64>, cov: Matrix4<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("track {id}: radius must be positive")));
        }
        Ok(Self {
            id,
            mean,
            cov,
            radius,
        })
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.mean[2], self.mean[3])
    }

    pub fn snapshot(&self) -> ObstacleSnapshot {
        ObstacleSnapshot {
            position: self.position(),
            pos_cov: self.cov.fixed_view::<2, 2>(0, 0).into_owned(),
            radius: self.radius,
        }
    }
}

/// Predicted position, its covariance and the obstacle radius at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleSnapshot {
    pub position: Vector2<f64>,
    pub pos_cov: Matrix2<f64>,
    pub radius: f64,
}

/// Noise settings of the tracker. Defaults are tunable, not measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Diagonal of the white-acceleration covariance, (m/s²)².
    #[serde(rename = "accel_noise_m2ps4")]
    pub accel_noise: [f64; 2],
    /// Diagonal of the position measurement covariance, m².
    #[serde(rename = "meas_noise_m2")]
    pub meas_noise: [f64; 2],
    /// Initial position variance, m².
    #[serde(rename = "init_pos_var_m2")]
    pub init_pos_var: f64,
    /// Initial velocity variance, (m/s)².
    #[serde(rename = "init_vel_var_m2ps2")]
    pub init_vel_var: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            accel_noise: [0.3, 0.3],
            meas_noise: [0.01, 0.01],
            init_pos_var: 1.0,
            init_vel_var: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accel_noise.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("tracker.accel_noise_m2ps4", "variances must be non-negative"));
        }
        if self.meas_noise.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("tracker.meas_noise_m2", "variances must be positive"));
        }
        if !(self.init_pos_var > 0.0 && self.init_vel_var > 0.0) {
            return Err(Error::config("tracker.init_pos_var_m2", "initial variances must be positive"));
        }
        Ok(())
    }

    pub fn meas_noise_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.meas_noise[0], 0.0, 0.0, self.meas_noise[1])
    }
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn injection(dt: f64) -> Matrix4x2<f64> {
    let h = 0.5 * dt * dt;
    Matrix4x2::new(h, 0.0, 0.0, h, dt, 0.0, 0.0, dt)
}

/// One constant-velocity prediction step.
pub fn lkf_predict(track: &PedestrianTrack, dt: f64, accel_noise: &Vector2<f64>) -> PedestrianTrack {
    let f = transition(dt);
    let g = injection(dt);
    let q = Matrix2::from_diagonal(accel_noise);
    let cov = f * track.cov * f.transpose() + g * q * g.transpose();
    PedestrianTrack {
        mean: f * track.mean,
        cov: (cov + cov.transpose()) * 0.5,
        ..*track
    }
}

/// Kalman update with a position measurement.
pub fn lkf_update(
    track: &PedestrianTrack,
    measurement: &Vector2<f64>,
    meas_noise: &Matrix2<f64>,
) -> Result<PedestrianTrack> {
    let p = &track.cov;
    let s = p.fixed_view::<2, 2>(0, 0) + meas_noise;
    let s_inv = s
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical(format!("singular innovation covariance {s}")))?;
    // H = [I 0], so P Hᵀ is the first two columns of P.
    let pht: Matrix4x2<f64> = p.fixed_view::<4, 2>(0, 0).into_owned();
    let gain = pht * s_inv;
    let innovation = measurement - track.position();
    let mean = track.mean + gain * innovation;
    // Joseph form keeps the posterior symmetric PSD.
    let mut i_kh = Matrix4::identity();
    for r in 0..4 {
        for c in 0..2 {
            i_kh[(r, c)] -= gain[(r, c)];
        }
    }
    let cov = i_kh * p * i_kh.transpose() + gain * meas_noise * gain.transpose();
    Ok(PedestrianTrack {
        mean,
        cov: (cov + cov.transpose()) * 0.5,
        ..*track
    })
}

/// Snapshots at `0, dt, ..., n_steps * dt` without measurement updates.
pub fn predict_horizon(
    track: &PedestrianTrack,
    n_steps: usize,
    dt: f64,
    accel_noise: &Vector2<f64>,
) -> Vec<ObstacleSnapshot> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut t = *track;
    out.push(t.snapshot());
    for _ in 0..n_steps {
        t = lkf_predict(&t, dt, accel_noise);
        out.push(t.snapshot());
    }
    out
}

/// Per-pedestrian bank of tracks keyed by pedestrian index.
#[derive(Debug, Clone)]
pub struct PedestrianTracker {
    config: TrackerConfig,
    tracks: Vec<Option<PedestrianTrack>>,
}

impl PedestrianTracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Predicts every track by `dt` and fuses the new measurements. A
    /// pedestrian seen for the first time starts at rest with the initial
    /// covariance.
    pub fn observe(&mut self, measurements: &[(Vector2<f64>, f64)], dt: f64) -> Result<()> {
        if self.tracks.len() < measurements.len() {
            self.tracks.resize(measurements.len(), None);
        }
        let accel = Vector2::from(self.config.accel_noise);
        let r = self.config.meas_noise_matrix();
        for (id, (z, radius)) in measurements.iter().enumerate() {
            let track = match self.tracks[id] {
                Some(t) => lkf_update(&lkf_predict(&t, dt, &accel), z, &r)?,
                None => {
                    let c = &self.config;
                    let cov = Matrix4::from_diagonal(&Vector4::new(
                        c.init_pos_var,
                        c.init_pos_var,
                        c.init_vel_var,
                        c.init_vel_var,
                    ));
                    let prior = PedestrianTrack::new(id, Vector4::new(z[0], z[1], 0.0, 0.0), cov, *radius)?;
                    lkf_update(&prior, z, &r)?
                }
            };
            self.tracks[id] = Some(track);
        }
        Ok(())
    }

    pub fn tracks(&self) -> impl Iterator<Item = &PedestrianTrack> {
        self.tracks.iter().flatten()
    }

    /// Predictions of every live track over `[0, span]` at step `dt_p`.
    pub fn predictions(&self, span: f64, dt_p: f64) -> Vec<Vec<ObstacleSnapshot>> {
        self.predictions_from(span, dt_p, None)
    }

    /// As [`predictions`](Self::predictions), but with `Some(var)` each
    /// track's position covariance is reset to `var·I` (and its correlation
    /// with velocity dropped) before predicting, so the uncertainty seen by
    /// the planner starts at a fixed size instead of the filter posterior.
    pub fn predictions_from(&self, span: f64, dt_p: f64, pos_var: Option<f64>) -> Vec<Vec<ObstacleSnapshot>> {
        let steps = prediction_steps(span, dt_p);
        let accel = Vector2::from(self.config.accel_noise);
        self.tracks()
            .map(|t| {
                let mut t = *t;
                if let Some(var) = pos_var {
                    let vel = t.cov.fixed_view::<2, 2>(2, 2).into_owned();
                    t.cov = Matrix4::zeros();
                    t.cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&(Matrix2::identity() * var));
                    t.cov.fixed_view_mut::<2, 2>(2, 2).copy_from(&vel);
                }
                predict_horizon(&t, steps, dt_p, &accel)
            })
            .collect()
    }
}

/// Number of prediction steps of size `dt_p` needed to cover `span`.
pub fn prediction_steps(span: f64, dt_p: f64) -> usize {
    if span <= 0.0 {
        0
    } else {
        (span / dt_p - 1e-9).ceil() as usize
    }
}

/// Obstacle snapshots on the controller grid: `layers[k]` describes every
/// tracked pedestrian at time `k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredObstacles {
    layers: Vec<Vec<ObstacleSnapshot>>,
    dt: f64,
}

impl LayeredObstacles {
    /// `horizon + 1` empty layers.
    pub fn empty(horizon: usize, dt: f64) -> Self {
        Self {
            layers: vec![Vec::new(); horizon + 1],
            dt,
        }
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn obstacle_count(&self) -> usize {
        self.layers[0].len()
    }

    pub fn layer_at(&self, k: usize) -> Result<&[ObstacleSnapshot]> {
        self.layers
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Domain(format!("layer {k} outside horizon {}", self.horizon())))
    }

    /// Unchecked access for rollouts whose horizon matches the layers.
    #[inline]
    pub(crate) fn layer(&self, k: usize) -> &[ObstacleSnapshot] {
        &self.layers[k.min(self.layers.len() - 1)]
    }
}

fn floor_psd(m: Matrix2<f64>) -> Matrix2<f64> {
    let m = (m + m.transpose()) * 0.5;
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let min_eig = 0.5 * tr - disc;
    if min_eig < COV_FLOOR {
        m + Matrix2::identity() * (COV_FLOOR - min_eig)
    } else {
        m
    }
}

/// Resamples per-pedestrian predictions taken every `dt_p` seconds onto the
/// controller grid `k * dt`, `k = 0..=horizon`. Times past `span` (or past
/// the last available prediction) hold the last prediction.
pub fn build_layers(
    predictions: &[Vec<ObstacleSnapshot>],
    dt_p: f64,
    horizon: usize,
    dt: f64,
    span: f64,
) -> Result<LayeredObstacles> {
    if !(dt > 0.0 && dt_p > 0.0) {
        return Err(Error::Domain("time steps must be positive".into()));
    }
    if let Some(i) = predictions.iter().position(Vec::is_empty) {
        return Err(Error::Domain(format!("pedestrian {i} has an empty prediction list")));
    }
    let mut layers = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let t = (k as f64 * dt).min(span.max(0.0));
        let layer = predictions
            .iter()
            .map(|pred| {
                let last = pred.len() - 1;
                let s = (t / dt_p).min(last as f64);
                let j = (s.floor() as usize).min(last);
                let frac = s - j as f64;
                if frac <= 0.0 || j == last {
                    return pred[j];
                }
                let (a, b) = (&pred[j], &pred[j + 1]);
                ObstacleSnapshot {
                    position: a.position + (b.position - a.position) * frac,
                    pos_cov: floor_psd(a.pos_cov + (b.pos_cov - a.pos_cov) * frac),
                    radius: a.radius,
                }
            })
            .collect();
        layers.push(layer);
    }
    Ok(LayeredObstacles { layers, dt })
}
