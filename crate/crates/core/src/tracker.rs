//! Recursive Bayesian multi-target tracking with position measurements.
//! The prior update comes from the learned predictor or from linear
//! constant-velocity / constant-acceleration models; occluded steps get
//! prior updates only.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::context::ContextLibrary;
use crate::data::{AgentTrajectory, AgentType, SceneSample, SceneTag, TrajectorySample};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Point};
use crate::kinematics::{propagate_gaussian, ControlInput, GaussianBelief, Mat5, Vec5};
use crate::model::{prepare, LatentChoice, Model};
use crate::synth::SynthScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessMode {
    Model,
    Cvm,
    Cam,
}

impl ProcessMode {
    pub const ALL: [ProcessMode; 3] = [ProcessMode::Model, ProcessMode::Cvm, ProcessMode::Cam];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcessMode::Model => "model",
            ProcessMode::Cvm => "cvm",
            ProcessMode::Cam => "cam",
        }
    }

    fn state_dim(self) -> usize {
        match self {
            ProcessMode::Model => 5,
            ProcessMode::Cvm => 4,
            ProcessMode::Cam => 6,
        }
    }
}

impl fmt::Display for ProcessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(ProcessMode::Model),
            "cvm" => Ok(ProcessMode::Cvm),
            "cam" => Ok(ProcessMode::Cam),
            other => Err(Error::InvalidArgument(format!("unknown process mode `{other}` (expected model, cvm or cam)"))),
        }
    }
}

/// Diagonal process noise intensities. Each mode drives its highest state
/// derivative with white noise of the given intensity and keeps only the
/// diagonal of the resulting discrete covariance: CVM acceleration
/// (m²/s³), CAM jerk (m²/s⁵), model mode longitudinal acceleration
/// (m²/s³, with heading and slip at `ANGLE_PER_ACCEL` rad per m/s²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoise {
    pub cvm: f64,
    pub cam: f64,
    pub model: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            cvm: 10.0,
            cam: 100.0,
            model: 1.0,
        }
    }
}

impl ProcessNoise {
    pub fn get(&self, mode: ProcessMode) -> f64 {
        match mode {
            ProcessMode::Model => self.model,
            ProcessMode::Cvm => self.cvm,
            ProcessMode::Cam => self.cam,
        }
    }

    pub fn set(&mut self, mode: ProcessMode, q: f64) {
        match mode {
            ProcessMode::Model => self.model = q,
            ProcessMode::Cvm => self.cvm = q,
            ProcessMode::Cam => self.cam = q,
        }
    }

    /// Diagonal of `Q` for one step of `dt` seconds.
    pub fn diagonal(&self, mode: ProcessMode, dt: f64) -> Vec<f64> {
        let q = self.get(mode);
        let (d2, d4) = (dt * dt, dt.powi(4));
        match mode {
            ProcessMode::Cvm => vec![q * d4 / 4.0, q * d4 / 4.0, q * d2, q * d2],
            ProcessMode::Cam => {
                let d6 = dt.powi(6);
                vec![q * d6 / 36.0, q * d6 / 36.0, q * d4 / 4.0, q * d4 / 4.0, q * d2, q * d2]
            }
            ProcessMode::Model => {
                let a2 = ANGLE_PER_ACCEL * ANGLE_PER_ACCEL;
                vec![q * d4 / 4.0, q * d4 / 4.0, q * d2 * a2, q * d2, q * d2 * a2]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cvm", self.cvm), ("cam", self.cam), ("model", self.model)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("process noise {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Heading and slip noise per unit of model-mode acceleration noise, rad
/// per m/s².
pub const ANGLE_PER_ACCEL: f64 = 0.1;

/// Steps during which no target is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub len: usize,
}

impl Occlusion {
    pub fn covers(&self, step: usize) -> bool {
        step >= self.start && step < self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Position measurement standard deviation, meters.
    pub measurement_std: f64,
    pub noise: ProcessNoise,
    pub occlusions: Vec<Occlusion>,
    /// First scored step; defaults to the model history length.
    pub score_from: Option<usize>,
    /// Initial slip-angle standard deviation in model mode, radians.
    pub slip_std: f64,
    /// Initial acceleration standard deviation in CAM mode, m/s².
    pub accel_std: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            measurement_std: 0.05,
            noise: ProcessNoise::default(),
            occlusions: Vec::new(),
            score_from: None,
            slip_std: 0.05,
            accel_std: 2.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.measurement_std >= 0.0) || !self.measurement_std.is_finite() {
            return Err(Error::Config(format!("measurement_std must be >= 0 m, got {}", self.measurement_std)));
        }
        if !(self.slip_std >= 0.0) || !(self.accel_std >= 0.0) {
            return Err(Error::Config("initial standard deviations must be >= 0".into()));
        }
        self.noise.validate()
    }

    pub fn occluded(&self, step: usize) -> bool {
        self.occlusions.iter().any(|o| o.covers(step))
    }
}

/// Measurements and ground truth of one scene on a shared time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingStream {
    pub tag: SceneTag,
    pub dt: f64,
    pub agent_ids: Vec<i64>,
    pub types: Vec<AgentType>,
    /// `[step][agent]`.
    pub measurements: Vec<Vec<Point>>,
    pub truth_position: Vec<Vec<Point>>,
    pub truth_velocity: Vec<Vec<Point>>,
}

impl TrackingStream {
    /// Noisy observations as measurements, simulator states as truth.
    pub fn from_synth(scene: &SynthScene) -> Result<Self> {
        let steps = scene.truth.iter().map(|t| t.states.len()).min().unwrap_or(0);
        let measurements = (0..steps)
            .map(|k| scene.trajectories.iter().map(|a| a.samples[k].pos()).collect())
            .collect();
        let truth_position = (0..steps).map(|k| scene.truth.iter().map(|a| [a.states[k].x, a.states[k].y]).collect()).collect();
        let truth_velocity = (0..steps)
            .map(|k| {
                scene
                    .truth
                    .iter()
                    .map(|a| {
                        let s = &a.states[k];
                        [s.v * (s.psi + s.beta).cos(), s.v * (s.psi + s.beta).sin()]
                    })
                    .collect()
            })
            .collect();
        let s = Self {
            tag: scene.tag.clone(),
            dt: scene.dt,
            agent_ids: scene.trajectories.iter().map(|a| a.agent_id).collect(),
            types: scene.trajectories.iter().map(|a| a.agent_type).collect(),
            measurements,
            truth_position,
            truth_velocity,
        };
        s.validate()?;
        Ok(s)
    }

    /// Recorded trajectories serve as both measurements and truth. Only
    /// agents present over the longest common grid span are kept.
    pub fn from_trajectories(tag: SceneTag, trajectories: &[AgentTrajectory], dt: f64) -> Result<Self> {
        let start = trajectories.iter().filter_map(|a| a.samples.first()).map(|s| s.t).fold(f64::INFINITY, f64::min);
        let end = trajectories.iter().filter_map(|a| a.samples.last()).map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
        if !start.is_finite() {
            return Err(Error::Data("no trajectory samples to track".into()));
        }
        let steps = ((end - start) / dt).round() as usize + 1;
        let full: Vec<&AgentTrajectory> = trajectories
            .iter()
            .filter(|a| a.samples.len() == steps && (a.samples[0].t - start).abs() < dt * 1e-6)
            .collect();
        if full.is_empty() {
            return Err(Error::Data("no agent spans the whole recording".into()));
        }
        let grid = |f: &dyn Fn(&TrajectorySample) -> Point| -> Vec<Vec<Point>> {
            (0..steps).map(|k| full.iter().map(|a| f(&a.samples[k])).collect()).collect()
        };
        let s = Self {
            tag,
            dt,
            agent_ids: full.iter().map(|a| a.agent_id).collect(),
            types: full.iter().map(|a| a.agent_type).collect(),
            measurements: grid(&|s| s.pos()),
            truth_position: grid(&|s| s.pos()),
            truth_velocity: grid(&|s| s.velocity()),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.measurements.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    fn validate(&self) -> Result<()> {
        if self.steps() < 3 || self.n_agents() == 0 {
            return Err(Error::Data(format!("stream {} needs >= 3 steps and >= 1 target", self.tag.scene_id)));
        }
        let n = self.n_agents();
        let shapes_ok = [&self.measurements, &self.truth_position, &self.truth_velocity]
            .iter()
            .all(|g| g.len() == self.steps() && g.iter().all(|r| r.len() == n));
        if !shapes_ok {
            return Err(Error::Data("stream grids disagree in shape".into()));
        }
        if self.measurements.iter().flatten().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Data("non-finite measurement".into()));
        }
        Ok(())
    }
}

/// Gaussian belief of one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: i64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Steps since the last measurement update.
    pub since_measurement: usize,
}

impl Track {
    pub fn position(&self) -> Point {
        [self.mean[0], self.mean[1]]
    }

    pub fn velocity(&self, mode: ProcessMode) -> Point {
        match mode {
            ProcessMode::Model => {
                let (psi, v, beta) = (self.mean[2], self.mean[3], self.mean[4]);
                [v * (psi + beta).cos(), v * (psi + beta).sin()]
            }
            _ => [self.mean[2], self.mean[3]],
        }
    }

    fn belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: Vec5::from_iterator(self.mean.iter().copied()),
            cov: Mat5::from_iterator(self.cov.iter().copied()),
        }
    }

    fn set_belief(&mut self, b: &GaussianBelief) {
        self.mean = DVector::from_iterator(5, b.mean.iter().copied());
        self.cov = DMatrix::from_iterator(5, 5, b.cov.iter().copied());
    }
}

/// Linear-Gaussian update `z = H x + r`, `r ~ N(0, R)`, in Joseph form.
pub fn measurement_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite measurement".into()));
    }
    let s = h * cov * h.transpose() + r;
    let s_inv = s
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("singular innovation covariance {s}")))?;
    let k = cov * h.transpose() * s_inv;
    let mean = mean + &k * (z - h * mean);
    let i_kh = DMatrix::identity(cov.nrows(), cov.ncols()) - &k * h;
    let cov = &i_kh * cov * i_kh.transpose() + &k * r * k.transpose();
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Linear propagation `x ← F x`, `P ← F P Fᵀ + Q` for the CVM / CAM states.
pub fn linear_prior(track: &mut Track, mode: ProcessMode, dt: f64, noise: &ProcessNoise) -> Result<()> {
    let n = mode.state_dim();
    let mut f = DMatrix::identity(n, n);
    match mode {
        ProcessMode::Cvm => {
            f[(0, 2)] = dt;
            f[(1, 3)] = dt;
        }
        ProcessMode::Cam => {
            f[(0, 2)] = dt;
            f[(1, 3)] = dt;
            f[(2, 4)] = dt;
            f[(3, 5)] = dt;
            f[(0, 4)] = dt * dt / 2.0;
            f[(1, 5)] = dt * dt / 2.0;
        }
        ProcessMode::Model => {
            return Err(Error::InvalidArgument("model mode has no linear prior".into()));
        }
    }
    track.mean = &f * &track.mean;
    track.cov = &f * &track.cov * f.transpose() + DMatrix::from_diagonal(&DVector::from_vec(noise.diagonal(mode, dt)));
    Ok(())
}

/// Model-mode prior step of a kinematic target: linearized propagation with
/// the predicted control distribution plus the diagonal process noise.
pub fn kinematic_prior(
    track: &mut Track,
    control: &ControlInput,
    sigma_uu: &Matrix2<f64>,
    model: &Model,
    noise: &ProcessNoise,
) -> Result<()> {
    let mut b = propagate_gaussian(&track.belief(), control, sigma_uu, &model.config.bicycle)?;
    for (i, q) in noise.diagonal(ProcessMode::Model, model.config.dt).into_iter().enumerate() {
        b.cov[(i, i)] += q;
    }
    b.mean[2] = wrap_angle(b.mean[2]);
    track.set_belief(&b);
    Ok(())
}

/// Model-mode prior step of a target decoded as displacements: the mean
/// moves to the predicted position with heading and speed of the step, the
/// covariance follows the zero-control bicycle Jacobian.
fn displacement_prior(track: &mut Track, target: Point, model: &Model, noise: &ProcessNoise) -> Result<()> {
    let mut b = propagate_gaussian(&track.belief(), &ControlInput::default(), &Matrix2::zeros(), &model.config.bicycle)?;
    for (i, q) in noise.diagonal(ProcessMode::Model, model.config.dt).into_iter().enumerate() {
        b.cov[(i, i)] += q;
    }
    let (dx, dy) = (target[0] - track.mean[0], target[1] - track.mean[1]);
    let speed = dx.hypot(dy) / model.config.dt;
    b.mean[0] = target[0];
    b.mean[1] = target[1];
    if speed > 1e-6 {
        b.mean[2] = dy.atan2(dx);
    }
    b.mean[3] = speed;
    b.mean[4] = 0.0;
    track.set_belief(&b);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub occluded: bool,
    pub position_rmse: f64,
    pub velocity_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub mode: ProcessMode,
    pub scene_id: String,
    pub position_rmse: f64,
    pub velocity_rmse: f64,
    pub per_step: Vec<StepError>,
}

/// Aggregate RMSE over several reports, weighting every scored step and
/// target equally.
pub fn pooled_rmse(reports: &[TrackingReport]) -> (f64, f64) {
    let (mut p, mut v, mut n) = (0.0, 0.0, 0usize);
    for r in reports {
        for s in &r.per_step {
            p += s.position_rmse * s.position_rmse;
            v += s.velocity_rmse * s.velocity_rmse;
            n += 1;
        }
    }
    ((p / n as f64).sqrt(), (v / n as f64).sqrt())
}

/// Multi-target filter over one stream.
pub struct Tracker<'a> {
    mode: ProcessMode,
    config: &'a TrackerConfig,
    model: Option<&'a Model>,
    maps: Option<&'a ContextLibrary>,
    stream: &'a TrackingStream,
    pub tracks: Vec<Track>,
    /// Filtered means of the latest steps, oldest first.
    history: VecDeque<Vec<TrajectorySample>>,
    step: usize,
}

impl<'a> Tracker<'a> {
    /// Tracks initialized from the first two measurements.
    pub fn new(
        stream: &'a TrackingStream,
        mode: ProcessMode,
        config: &'a TrackerConfig,
        model: Option<&'a Model>,
        maps: Option<&'a ContextLibrary>,
    ) -> Result<Self> {
        config.validate()?;
        if mode == ProcessMode::Model {
            let m = model.ok_or_else(|| Error::InvalidArgument("model mode needs a checkpoint".into()))?;
            if (m.config.dt - stream.dt).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "stream dt {} s differs from model dt {} s",
                    stream.dt, m.config.dt
                )));
            }
        }
        let dt = stream.dt;
        let r = config.measurement_std.powi(2);
        let tracks = (0..stream.n_agents())
            .map(|a| {
                let z0 = stream.measurements[0][a];
                let z1 = stream.measurements[1][a];
                let vel = [(z1[0] - z0[0]) / dt, (z1[1] - z0[1]) / dt];
                let vel_var = 2.0 * r / (dt * dt);
                let (mean, diag) = match mode {
                    ProcessMode::Cvm => (vec![z1[0], z1[1], vel[0], vel[1]], vec![r, r, vel_var, vel_var]),
                    ProcessMode::Cam => {
                        let a2 = config.accel_std.powi(2);
                        (vec![z1[0], z1[1], vel[0], vel[1], 0.0, 0.0], vec![r, r, vel_var, vel_var, a2, a2])
                    }
                    ProcessMode::Model => {
                        let speed = vel[0].hypot(vel[1]);
                        let psi_var = if speed > 0.0 { (vel_var / (speed * speed)).min(1.0) } else { 1.0 };
                        (
                            vec![z1[0], z1[1], vel[1].atan2(vel[0]), speed, 0.0],
                            vec![r, r, psi_var, vel_var, config.slip_std.powi(2)],
                        )
                    }
                };
                Track {
                    id: stream.agent_ids[a],
                    mean: DVector::from_vec(mean),
                    cov: DMatrix::from_diagonal(&DVector::from_vec(diag)),
                    since_measurement: 0,
                }
            })
            .collect();
        let mut t = Self {
            mode,
            config,
            model,
            maps,
            stream,
            tracks,
            history: VecDeque::new(),
            step: 1,
        };
        t.record();
        Ok(t)
    }

    /// Index of the step the tracks currently describe.
    pub fn step(&self) -> usize {
        self.step
    }

    fn record(&mut self) {
        let t = self.step as f64 * self.stream.dt;
        let row = self
            .tracks
            .iter()
            .map(|tr| {
                let [vx, vy] = tr.velocity(self.mode);
                let (v, psi) = match self.mode {
                    ProcessMode::Model => (tr.mean[3].max(0.0), wrap_angle(tr.mean[2])),
                    _ => (vx.hypot(vy), vy.atan2(vx)),
                };
                TrajectorySample {
                    t,
                    x: tr.mean[0],
                    y: tr.mean[1],
                    v,
                    psi,
                }
            })
            .collect();
        self.history.push_back(row);
        let keep = self.model.map_or(1, |m| m.config.t_h);
        while self.history.len() > keep {
            self.history.pop_front();
        }
    }

    /// Advance every track by one step.
    pub fn prior_update(&mut self) -> Result<()> {
        let dt = self.stream.dt;
        match self.mode {
            ProcessMode::Cvm | ProcessMode::Cam => {
                for t in &mut self.tracks {
                    linear_prior(t, self.mode, dt, &self.config.noise)?;
                }
            }
            ProcessMode::Model => {
                let model = self.model.ok_or_else(|| Error::InvalidArgument("model mode needs a checkpoint".into()))?;
                let t_h = model.config.t_h;
                let std = model.config.control_std;
                let default_sigma = Matrix2::new(std[0] * std[0], 0.0, 0.0, std[1] * std[1]);
                if self.history.len() < t_h {
                    // Not enough filtered history for the predictor yet.
                    for t in &mut self.tracks {
                        kinematic_prior(t, &ControlInput::default(), &default_sigma, model, &self.config.noise)?;
                    }
                } else {
                    let sample = self.window(t_h);
                    let prepared = prepare(&sample, &model.config, self.maps, false)?;
                    let pred = model.predict(&[&prepared], LatentChoice::Zero, 1)?.remove(0);
                    for (a, t) in self.tracks.iter_mut().enumerate() {
                        match (&pred.controls[a], &pred.control_variance[a]) {
                            (Some(u), Some(var)) => {
                                let sigma = Matrix2::new(var[0][0], 0.0, 0.0, var[0][1]);
                                kinematic_prior(t, &ControlInput::new(u[0][0], u[0][1]), &sigma, model, &self.config.noise)?;
                            }
                            _ => displacement_prior(t, pred.positions[0][a], model, &self.config.noise)?,
                        }
                    }
                }
            }
        }
        for t in &mut self.tracks {
            t.since_measurement += 1;
        }
        self.step += 1;
        Ok(())
    }

    fn window(&self, t_h: usize) -> SceneSample {
        let rows: Vec<&Vec<TrajectorySample>> = self.history.iter().skip(self.history.len() - t_h).collect();
        SceneSample {
            scene: self.stream.tag.clone(),
            start_step: (self.step + 1 - t_h) as i64,
            dt: self.stream.dt,
            t_h,
            t_f: 0,
            trajectories: (0..self.tracks.len())
                .map(|a| AgentTrajectory {
                    agent_id: self.stream.agent_ids[a],
                    agent_type: self.stream.types[a],
                    samples: rows.iter().map(|r| r[a]).collect(),
                })
                .collect(),
        }
    }

    /// Position update of every track with this step's measurements.
    pub fn measurement_update(&mut self, measurements: &[Point]) -> Result<()> {
        let r = DMatrix::from_diagonal_element(2, 2, self.config.measurement_std.powi(2));
        let n = self.mode.state_dim();
        let mut h = DMatrix::zeros(2, n);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        for (t, z) in self.tracks.iter_mut().zip(measurements) {
            let (mean, cov) = measurement_update(&t.mean, &t.cov, &DVector::from_row_slice(z), &h, &r)?;
            t.mean = mean;
            t.cov = cov;
            if self.mode == ProcessMode::Model {
                t.mean[2] = wrap_angle(t.mean[2]);
            }
            t.since_measurement = 0;
        }
        Ok(())
    }

    /// Prior update, then the measurement update unless the step is
    /// occluded.
    pub fn advance(&mut self) -> Result<()> {
        self.prior_update()?;
        if !self.config.occluded(self.step) {
            let z = self.stream.measurements[self.step].clone();
            self.measurement_update(&z)?;
        }
        self.record();
        Ok(())
    }
}

/// Filter the whole stream and score position and velocity against truth
/// from `config.score_from` (default: the model history length, else 2).
pub fn run_tracking(
    stream: &TrackingStream,
    mode: ProcessMode,
    config: &TrackerConfig,
    model: Option<&Model>,
    maps: Option<&ContextLibrary>,
) -> Result<TrackingReport> {
    let mut tracker = Tracker::new(stream, mode, config, model, maps)?;
    let from = config.score_from.unwrap_or_else(|| model.map_or(2, |m| m.config.t_h)).max(2);
    if from >= stream.steps() {
        return Err(Error::InvalidArgument(format!(
            "stream of {} steps has nothing to score from step {from}",
            stream.steps()
        )));
    }
    let mut per_step = Vec::new();
    while tracker.step() + 1 < stream.steps() {
        tracker.advance()?;
        let k = tracker.step();
        if k < from {
            continue;
        }
        let n = stream.n_agents() as f64;
        let (mut pe, mut ve) = (0.0, 0.0);
        for (a, t) in tracker.tracks.iter().enumerate() {
            let p = t.position();
            let v = t.velocity(mode);
            let tp = stream.truth_position[k][a];
            let tv = stream.truth_velocity[k][a];
            pe += (p[0] - tp[0]).powi(2) + (p[1] - tp[1]).powi(2);
            ve += (v[0] - tv[0]).powi(2) + (v[1] - tv[1]).powi(2);
        }
        per_step.push(StepError {
            step: k,
            occluded: config.occluded(k),
            position_rmse: (pe / n).sqrt(),
            velocity_rmse: (ve / n).sqrt(),
        });
    }
    let mut report = TrackingReport {
        mode,
        scene_id: stream.tag.scene_id.clone(),
        position_rmse: 0.0,
        velocity_rmse: 0.0,
        per_step,
    };
    let (p, v) = pooled_rmse(std::slice::from_ref(&report));
    report.position_rmse = p;
    report.velocity_rmse = v;
    Ok(report)
}

/// Pick the process noise intensity from `grid` that minimizes pooled
/// position RMSE on held-out streams. Returns `(q, rmse)`.
pub fn tune_process_noise(
    streams: &[TrackingStream],
    mode: ProcessMode,
    config: &TrackerConfig,
    grid: &[f64],
    model: Option<&Model>,
    maps: Option<&ContextLibrary>,
) -> Result<(f64, f64)> {
    let mut best = (f64::NAN, f64::INFINITY);
    for &q in grid {
        let mut cfg = config.clone();
        cfg.noise.set(mode, q);
        let reports: Vec<TrackingReport> = streams.iter().map(|s| run_tracking(s, mode, &cfg, model, maps)).collect::<Result<_>>()?;
        let (p, _) = pooled_rmse(&reports);
        if p < best.1 {
            best = (q, p);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::InvalidArgument("empty process noise grid".into()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig};

    fn line_stream(accel: f64, steps: usize) -> TrackingStream {
        let dt = 0.1;
        let pos: Vec<Vec<Point>> = (0..steps)
            .map(|k| {
                let t = k as f64 * dt;
                vec![[1.0 + 2.0 * t + 0.5 * accel * t * t, -1.0 + 0.5 * t]]
            })
            .collect();
        let vel = (0..steps).map(|k| vec![[2.0 + accel * k as f64 * dt, 0.5]]).collect();
        TrackingStream {
            tag: SceneTag {
                scene_id: "line".into(),
                location: "nowhere".into(),
            },
            dt,
            agent_ids: vec![3],
            types: vec![AgentType::Vehicle],
            measurements: pos.clone(),
            truth_position: pos,
            truth_velocity: vel,
        }
    }

    #[test]
    fn scalar_update_matches_closed_form() {
        let (m, p) = measurement_update(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15 && (p[(0, 0)] - 0.5).abs() < 1e-15);
        let singular = measurement_update(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::zeros(1, 1),
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::zeros(1, 1),
        );
        assert!(singular.is_err());
    }

    #[test]
    fn cvm_linear_step() {
        let mut t = Track {
            id: 0,
            mean: DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]),
            cov: DMatrix::identity(4, 4),
            since_measurement: 0,
        };
        let noise = ProcessNoise { cvm: 0.0, ..Default::default() };
        linear_prior(&mut t, ProcessMode::Cvm, 0.1, &noise).unwrap();
        assert!((t.mean[0] - 0.1).abs() < 1e-15);
        // Position variance grows by dt² of the velocity variance.
        assert!((t.cov[(0, 0)] - 1.01).abs() < 1e-15 && (t.cov[(0, 2)] - 0.1).abs() < 1e-15);
        assert_eq!(t.cov[(2, 2)], 1.0);
    }

    #[test]
    fn exact_measurements_recover_truth() {
        let cfg = TrackerConfig {
            measurement_std: 0.0,
            ..Default::default()
        };
        let s = line_stream(0.0, 30);
        let r = run_tracking(&s, ProcessMode::Cvm, &cfg, None, None).unwrap();
        assert!(r.position_rmse < 1e-9, "{}", r.position_rmse);
        // Constant acceleration truth is followed without steady-state error.
        let cfg = TrackerConfig {
            measurement_std: 1e-9,
            ..Default::default()
        };
        let r = run_tracking(&line_stream(1.5, 60), ProcessMode::Cam, &cfg, None, None).unwrap();
        assert!(r.per_step.last().unwrap().position_rmse < 1e-6);
    }

    #[test]
    fn occlusion_skips_updates() {
        let cfg = TrackerConfig {
            occlusions: vec![Occlusion { start: 10, len: 10 }],
            ..Default::default()
        };
        let s = line_stream(2.0, 40);
        let mut tr = Tracker::new(&s, ProcessMode::Cvm, &cfg, None, None).unwrap();
        let mut traces = Vec::new();
        while tr.step() + 1 < s.steps() {
            tr.advance().unwrap();
            traces.push((tr.step(), tr.tracks[0].cov.trace(), tr.tracks[0].since_measurement));
        }
        let during: Vec<_> = traces.iter().filter(|t| (10..20).contains(&t.0)).collect();
        assert!(during.windows(2).all(|w| w[1].1 > w[0].1));
        assert_eq!(during.last().unwrap().2, 10);
        assert_eq!(traces.iter().find(|t| t.0 == 20).unwrap().2, 0);
    }

    #[test]
    fn model_mode_delegates_to_gaussian_propagation() {
        let cfg = ModelConfig {
            ablation: Ablation::Tck,
            ..ModelConfig::compact()
        };
        let model = Model::new(cfg, 0).unwrap();
        let mut t = Track {
            id: 0,
            mean: DVector::from_vec(vec![1.0, 2.0, 0.3, 5.0, 0.02]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.01, 0.3, 0.001])),
            since_measurement: 0,
        };
        let expected = propagate_gaussian(&t.belief(), &ControlInput::new(0.5, 0.1), &Matrix2::zeros(), &model.config.bicycle).unwrap();
        let noise = ProcessNoise { model: 0.0, ..Default::default() };
        kinematic_prior(&mut t, &ControlInput::new(0.5, 0.1), &Matrix2::zeros(), &model, &noise).unwrap();
        assert_eq!(t.belief().cov, expected.cov);
        assert_eq!(t.belief().mean, expected.mean);
    }

    #[test]
    fn model_mode_requires_a_model() {
        let s = line_stream(0.0, 20);
        assert!(Tracker::new(&s, ProcessMode::Model, &TrackerConfig::default(), None, None).is_err());
    }

    #[test]
    fn model_mode_runs_on_synthetic_stream() {
        use crate::synth::{generate, Archetype, ScenarioSpec};
        let cfg = ModelConfig {
            t_h: 4,
            ..ModelConfig::compact()
        };
        let model = Model::new(cfg, 0).unwrap();
        let scene = generate(&ScenarioSpec::new(Archetype::Intersection, 3, 30, 0.1, 0.05, 4)).unwrap();
        let s = TrackingStream::from_synth(&scene).unwrap();
        let tc = TrackerConfig {
            occlusions: vec![Occlusion { start: 12, len: 5 }],
            ..Default::default()
        };
        let r = run_tracking(&s, ProcessMode::Model, &tc, Some(&model), None).unwrap();
        assert_eq!(r.per_step.first().unwrap().step, 4);
        assert!(r.position_rmse.is_finite() && r.position_rmse > 0.0);
    }
}
