//! Seeded generator of interacting vehicle scenes (highway merge,
//! four-way intersection, roundabout) plus constant-velocity and
//! constant-acceleration baselines.
//!
//! Every vehicle is simulated through [`bicycle_step`] with bounded
//! controls, so noise-free trajectories are feasible for the kinematic
//! decoder by construction.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_samples, AgentTrajectory, AgentType, HorizonConfig, SceneSample, SceneTag, TrajectorySample};
use crate::error::{Error, Result};
use crate::geom::{dist, to_world, wrap_angle, Point};
use crate::kinematics::{bicycle_step, rollout, BicycleParams, ControlInput, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Highway,
    Intersection,
    Roundabout,
}

impl Archetype {
    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Highway => "highway",
            Archetype::Intersection => "intersection",
            Archetype::Roundabout => "roundabout",
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Archetype::Highway),
            "intersection" => Ok(Archetype::Intersection),
            "roundabout" => Ok(Archetype::Roundabout),
            _ => Err(Error::InvalidArgument(format!(
                "unknown archetype `{s}` (expected highway, intersection or roundabout)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub archetype: Archetype,
    pub n_agents: usize,
    pub duration_steps: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Standard deviation of the position noise added to observations, m.
    pub noise_std: f64,
    pub seed: u64,
    /// Ring radius for roundabouts, m; drawn when absent.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Cruise speed, m/s; drawn per agent when absent.
    #[serde(default)]
    pub speed: Option<f64>,
    /// Vehicle parameters; `dt` is taken from the spec.
    #[serde(default)]
    pub vehicle: BicycleParams,
    /// Largest slip angle the path controller may command, rad.
    #[serde(default = "default_max_slip")]
    pub max_slip: f64,
}

fn default_max_slip() -> f64 {
    0.4
}

impl ScenarioSpec {
    pub fn new(archetype: Archetype, n_agents: usize, duration_steps: usize, dt: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            archetype,
            n_agents,
            duration_steps,
            dt,
            noise_std,
            seed,
            radius: None,
            speed: None,
            vehicle: BicycleParams::default(),
            max_slip: default_max_slip(),
        }
    }

    pub fn bicycle(&self) -> BicycleParams {
        BicycleParams {
            dt: self.dt,
            ..self.vehicle
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be >= 1".into()));
        }
        if self.duration_steps < 2 {
            return Err(Error::Config("duration_steps must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.max_slip > 0.0 && self.max_slip < FRAC_PI_2) {
            return Err(Error::Config(format!("max_slip must lie in (0, π/2), got {}", self.max_slip)));
        }
        self.bicycle().validate()?;
        if let Some(v) = self.speed {
            if !(v > 0.0) {
                return Err(Error::Config(format!("speed must be > 0 m/s, got {v}")));
            }
        }
        Ok(())
    }

    /// Tightest turn radius the controller can hold in steady state.
    pub fn min_turn_radius(&self) -> f64 {
        self.vehicle.l_r / self.max_slip.sin()
    }
}

/// Road layout emitted alongside a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub archetype: Archetype,
    /// Reference path of every agent, sampled as a polyline.
    pub lanes: Vec<Vec<Point>>,
    pub conflict_points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTruth {
    pub agent_id: i64,
    /// States at every step, `duration_steps` long.
    pub states: Vec<VehicleState>,
    /// Control applied between consecutive states.
    pub controls: Vec<ControlInput>,
    pub free_speed: f64,
    /// Whether a yield rule ever lowered this agent's target speed.
    pub yielded: bool,
    /// Speed when the agent reached the conflict point it yields at.
    pub speed_at_conflict: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub tag: SceneTag,
    pub dt: f64,
    /// Observations with position noise.
    pub trajectories: Vec<AgentTrajectory>,
    pub truth: Vec<AgentTruth>,
    pub geometry: Geometry,
}

impl SynthScene {
    pub fn samples(&self, horizon: &HorizonConfig, stride: usize) -> Result<Vec<SceneSample>> {
        make_samples(&self.trajectories, horizon, &self.tag, stride)
    }
}

enum Seg {
    Line(Point, Point),
    /// Counter-clockwise for positive `sweep`.
    Arc { center: Point, radius: f64, start: f64, sweep: f64 },
}

const PATH_SPACING: f64 = 0.2;

#[derive(Clone, Debug)]
struct Path {
    pts: Vec<Point>,
    s: Vec<f64>,
}

impl Path {
    fn new(segs: &[Seg]) -> Path {
        let mut pts: Vec<Point> = Vec::new();
        for seg in segs {
            let (n, f): (usize, Box<dyn Fn(f64) -> Point>) = match *seg {
                Seg::Line(a, b) => (
                    (dist(a, b) / PATH_SPACING).ceil().max(1.0) as usize,
                    Box::new(move |u| [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]),
                ),
                Seg::Arc { center, radius, start, sweep } => (
                    (radius * sweep.abs() / PATH_SPACING).ceil().max(1.0) as usize,
                    Box::new(move |u| {
                        let th = start + u * sweep;
                        [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
                    }),
                ),
            };
            let first = if pts.is_empty() { 0 } else { 1 };
            for i in first..=n {
                pts.push(f(i as f64 / n as f64));
            }
        }
        let mut s = vec![0.0; pts.len()];
        for i in 1..pts.len() {
            s[i] = s[i - 1] + dist(pts[i - 1], pts[i]);
        }
        Path { pts, s }
    }

    fn len(&self) -> f64 {
        *self.s.last().unwrap_or(&0.0)
    }

    /// Nearest vertex, searched forward from `hint`.
    fn project(&self, p: Point, hint: usize) -> usize {
        let lo = hint.saturating_sub(5);
        let hi = (hint + 200).min(self.pts.len());
        (lo..hi)
            .min_by(|&a, &b| dist(self.pts[a], p).total_cmp(&dist(self.pts[b], p)))
            .unwrap_or(hint)
    }

    fn point_at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.len());
        let i = self.s.partition_point(|&v| v < s).clamp(1, self.pts.len() - 1);
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        let w = ((s - self.s[i - 1]) / (self.s[i] - self.s[i - 1]).max(1e-12)).clamp(0.0, 1.0);
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    /// Heading of the path at arc length `s`.
    fn heading_at(&self, s: f64) -> f64 {
        let a = self.point_at(s);
        let b = self.point_at(s + PATH_SPACING);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Arc length of the first vertex within `tol` of `other`, if any,
    /// restricted to vertices inside `window` of the origin.
    fn first_near(&self, other: &Path, tol: f64, window: f64) -> Option<(f64, Point)> {
        let inside = |p: &Point| p[0].abs() <= window && p[1].abs() <= window;
        let theirs: Vec<Point> = other.pts.iter().copied().filter(inside).collect();
        self.pts
            .iter()
            .zip(&self.s)
            .filter(|(p, _)| inside(p))
            .find(|(p, _)| theirs.iter().any(|q| dist(**p, *q) < tol))
            .map(|(p, s)| (*s, *p))
    }
}

/// A rule "do not pass `stop_s` on my path until agent `other` is beyond
/// `other_clear_s` on its own".
#[derive(Clone, Debug)]
struct YieldRule {
    other: usize,
    stop_s: f64,
    conflict_s: f64,
    other_clear_s: f64,
}

#[derive(Clone, Debug)]
struct Driver {
    path: Path,
    idx: usize,
    free_speed: f64,
    /// Hold zero controls (steady circulation or straight cruising).
    steady: bool,
    rules: Vec<YieldRule>,
    /// Agent directly ahead in the same lane.
    leader: Option<usize>,
    yielded: bool,
    speed_at_conflict: Option<f64>,
}

impl Driver {
    fn progress(&self) -> f64 {
        self.path.s[self.idx]
    }
}

const BRAKE: f64 = 3.0;
const SPEED_GAIN: f64 = 2.0;
const SLIP_GAIN: f64 = 4.0;

fn stop_speed(distance: f64) -> f64 {
    (2.0 * BRAKE * distance.max(0.0)).sqrt()
}

/// Pure-pursuit steering turned into a slip-rate command, plus a
/// proportional speed command; both inside the control bounds.
fn control(d: &Driver, s: &VehicleState, v_des: f64, spec: &ScenarioSpec) -> ControlInput {
    let p = spec.bicycle();
    let a = (SPEED_GAIN * (v_des - s.v)).clamp(-p.a_max, p.a_max);
    let look = (s.v + 2.0).clamp(4.0, 12.0);
    let target = d.path.point_at(d.progress() + look);
    let course = s.psi + s.beta;
    let alpha = wrap_angle((target[1] - s.y).atan2(target[0] - s.x) - course);
    let l = dist(target, [s.x, s.y]).max(1e-6);
    let curvature = 2.0 * alpha.sin() / l;
    let lim = spec.max_slip.sin();
    let beta_t = (curvature * p.l_r).clamp(-lim, lim).asin();
    let beta_dot = (SLIP_GAIN * (beta_t - s.beta)).clamp(-p.beta_dot_max, p.beta_dot_max);
    ControlInput::new(a, beta_dot)
}

fn initial_state(path: &Path, s0: f64, v: f64) -> VehicleState {
    let p = path.point_at(s0);
    VehicleState::new(p[0], p[1], path.heading_at(s0), v, 0.0)
}

type SpeedCap<'a> = dyn Fn(usize, &[Driver], &[VehicleState]) -> Option<f64> + 'a;

fn simulate(
    drivers: &mut [Driver],
    init: Vec<VehicleState>,
    spec: &ScenarioSpec,
    extra_cap: &SpeedCap<'_>,
) -> Result<(Vec<Vec<VehicleState>>, Vec<Vec<ControlInput>>)> {
    let p = spec.bicycle();
    let n = drivers.len();
    let mut states = vec![init.clone()];
    let mut controls: Vec<Vec<ControlInput>> = vec![Vec::new(); n];
    let mut cur = init;
    for _ in 1..spec.duration_steps {
        for (d, s) in drivers.iter_mut().zip(&cur) {
            d.idx = d.path.project([s.x, s.y], d.idx);
        }
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let d = &drivers[i];
            let s = &cur[i];
            let mut v_des = d.free_speed;
            let mut yielding = false;
            for r in &d.rules {
                if drivers[r.other].progress() < r.other_clear_s && d.progress() <= r.stop_s {
                    let cap = stop_speed(r.stop_s - d.progress());
                    if cap < v_des {
                        v_des = cap;
                        yielding = true;
                    }
                }
            }
            if let Some(l) = d.leader {
                let gap = dist([cur[l].x, cur[l].y], [s.x, s.y]);
                v_des = v_des.min(((gap - 8.0) / 1.5).max(0.0));
            }
            if let Some(cap) = extra_cap(i, drivers, &cur) {
                if cap < v_des {
                    v_des = cap;
                    yielding = true;
                }
            }
            let u = if d.steady && !yielding && (v_des - s.v).abs() < 1e-12 {
                ControlInput::default()
            } else {
                control(d, s, v_des, spec)
            };
            next.push((bicycle_step(s, &u, &p)?, u, yielding));
        }
        for (i, (s, u, yielding)) in next.into_iter().enumerate() {
            let d = &mut drivers[i];
            d.yielded |= yielding;
            if let (None, Some(r)) = (d.speed_at_conflict, d.rules.first()) {
                if d.yielded && d.progress() >= r.conflict_s {
                    d.speed_at_conflict = Some(cur[i].v);
                }
            }
            controls[i].push(u);
            cur[i] = s;
        }
        states.push(cur.clone());
    }
    let per_agent = (0..n).map(|i| states.iter().map(|st| st[i]).collect()).collect();
    Ok((per_agent, controls))
}

/// Simulate one scene.
pub fn generate(spec: &ScenarioSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut drivers, init, geometry, cap): (Vec<Driver>, Vec<VehicleState>, Geometry, Box<SpeedCap<'static>>) =
        match spec.archetype {
            Archetype::Highway => highway(spec, &mut rng)?,
            Archetype::Intersection => intersection(spec, &mut rng)?,
            Archetype::Roundabout => roundabout(spec, &mut rng)?,
        };
    let (states, controls) = simulate(&mut drivers, init, spec, cap.as_ref())?;

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut trajectories = Vec::with_capacity(states.len());
    let mut truth = Vec::with_capacity(states.len());
    for (i, (st, ctl)) in states.into_iter().zip(controls).enumerate() {
        let samples = st
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (nx, ny) = if spec.noise_std > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                TrajectorySample {
                    t: k as f64 * spec.dt,
                    x: s.x + nx,
                    y: s.y + ny,
                    v: s.v.max(0.0),
                    psi: wrap_angle(s.psi),
                }
            })
            .collect();
        trajectories.push(AgentTrajectory {
            agent_id: i as i64,
            agent_type: AgentType::Vehicle,
            samples,
        });
        truth.push(AgentTruth {
            agent_id: i as i64,
            states: st,
            controls: ctl,
            free_speed: drivers[i].free_speed,
            yielded: drivers[i].yielded,
            speed_at_conflict: drivers[i].speed_at_conflict,
        });
    }
    Ok(SynthScene {
        tag: SceneTag {
            scene_id: format!("{}-{}", spec.archetype.as_str(), spec.seed),
            location: spec.archetype.as_str().to_string(),
        },
        dt: spec.dt,
        trajectories,
        truth,
        geometry,
    })
}

/// `n_scenes` scenes from `base`, scene `i` seeded with `base.seed + i` and
/// named `<archetype>-<i>`.
pub fn generate_set(base: &ScenarioSpec, n_scenes: usize) -> Result<Vec<SynthScene>> {
    (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let spec = ScenarioSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            };
            let mut scene = generate(&spec)?;
            scene.tag.scene_id = format!("{}-{i:04}", base.archetype.as_str());
            Ok(scene)
        })
        .collect()
}

fn cruise_speed(spec: &ScenarioSpec, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let drawn = rng.random_range(lo..hi);
    spec.speed.unwrap_or(drawn)
}

fn driver(path: Path, free_speed: f64, steady: bool) -> Driver {
    Driver {
        path,
        idx: 0,
        free_speed,
        steady,
        rules: Vec::new(),
        leader: None,
        yielded: false,
        speed_at_conflict: None,
    }
}

type Built = (Vec<Driver>, Vec<VehicleState>, Geometry, Box<SpeedCap<'static>>);

/// Cruising vehicles on a straight lane along +x, plus (with two or more
/// agents) one vehicle merging from an on-ramp and gap-seeking behind
/// conflicting lane traffic.
fn highway(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Built> {
    let n_lane = if spec.n_agents >= 2 { spec.n_agents - 1 } else { 1 };
    let v_lane = cruise_speed(spec, rng, 10.0, 14.0);
    let horizon_len = v_lane * spec.dt * spec.duration_steps as f64 + 100.0;
    let lane = Path::new(&[Seg::Line([-150.0, 0.0], [horizon_len, 0.0])]);
    let mut drivers = Vec::new();
    let mut init = Vec::new();
    let mut x = rng.random_range(-40.0..-10.0);
    for _ in 0..n_lane {
        let s0 = x + 150.0;
        let mut d = driver(lane.clone(), v_lane, true);
        d.idx = lane.project(lane.point_at(s0), (s0 / PATH_SPACING) as usize);
        init.push(VehicleState::new(x, 0.0, 0.0, v_lane, 0.0));
        drivers.push(d);
        x -= rng.random_range(15.0..30.0);
    }
    let mut conflicts = Vec::new();
    let mut merge_cap: Box<SpeedCap<'static>> = Box::new(|_, _, _| None);
    if spec.n_agents >= 2 {
        let theta: f64 = 0.15;
        let ramp_len = rng.random_range(35.0..55.0);
        let start = [-ramp_len * theta.cos(), -ramp_len * theta.sin()];
        let ramp = Path::new(&[Seg::Line(start, [0.0, 0.0]), Seg::Line([0.0, 0.0], [horizon_len, 0.0])]);
        let v_m = cruise_speed(spec, rng, 9.0, 13.0);
        init.push(initial_state(&ramp, 0.0, v_m));
        drivers.push(driver(ramp, v_m, false));
        conflicts.push([0.0, 0.0]);
        let merger = drivers.len() - 1;
        let headway = 1.2;
        merge_cap = Box::new(move |i, ds: &[Driver], st: &[VehicleState]| {
            if i != merger {
                return None;
            }
            let d = &ds[i];
            let to_merge = ramp_len - d.progress();
            if to_merge <= 0.0 {
                return None;
            }
            let t_m = to_merge / st[i].v.max(0.5);
            let mut cap: Option<f64> = None;
            for (j, s) in st.iter().enumerate().take(merger) {
                let _ = j;
                let t_l = -s.x / s.v.max(0.5);
                if (t_l - t_m).abs() < headway || (t_l > 0.0 && t_l < t_m && t_m - t_l < headway) {
                    let v = (to_merge / (t_l.max(0.0) + headway)).clamp(1.0, d.free_speed);
                    cap = Some(cap.map_or(v, |c: f64| c.min(v)));
                }
            }
            cap
        });
    }
    let geometry = Geometry {
        archetype: Archetype::Highway,
        lanes: drivers.iter().map(|d| d.path.pts.iter().step_by(10).copied().collect()).collect(),
        conflict_points: conflicts,
    };
    Ok((drivers, init, geometry, merge_cap))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Maneuver {
    Straight,
    Left,
    Right,
}

/// Right-hand lanes offset from the road axis, m.
const LANE_OFFSET: f64 = 2.0;

/// Path entering from the west heading east, rotated by `arm` quarter turns.
fn intersection_path(arm: usize, maneuver: Maneuver, approach: f64, radius: f64) -> Path {
    let w = LANE_OFFSET;
    let exit = 80.0;
    let segs = match maneuver {
        Maneuver::Straight => vec![Seg::Line([-approach, -w], [exit, -w])],
        Maneuver::Left => {
            let c = [w - radius, -w + radius];
            vec![
                Seg::Line([-approach, -w], [c[0], -w]),
                Seg::Arc { center: c, radius, start: -FRAC_PI_2, sweep: FRAC_PI_2 },
                Seg::Line([w, c[1]], [w, exit]),
            ]
        }
        Maneuver::Right => {
            let c = [-w - radius, -w - radius];
            vec![
                Seg::Line([-approach, -w], [c[0], -w]),
                Seg::Arc { center: c, radius, start: FRAC_PI_2, sweep: -FRAC_PI_2 },
                Seg::Line([-w, c[1]], [-w, -exit]),
            ]
        }
    };
    let mut path = Path::new(&segs);
    let rot = arm as f64 * FRAC_PI_2;
    for p in &mut path.pts {
        *p = to_world(*p, rot);
    }
    path
}

/// Four-armed crossing. Agents go straight or turn; where two paths meet,
/// the agent with the earlier free-flow arrival passes first and the other
/// holds before the conflict point until it has cleared.
fn intersection(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Built> {
    let min_r = spec.min_turn_radius();
    if min_r > 6.0 {
        return Err(Error::Infeasible(format!(
            "turn radius 6 m is below the {min_r:.2} m the vehicle can hold"
        )));
    }
    let n = spec.n_agents;
    let mut arms: Vec<usize> = (0..4).collect();
    let mut plans = Vec::with_capacity(n);
    for i in 0..n {
        if i % 4 == 0 {
            arms.shuffle_with(rng);
        }
        let arm = arms[i % 4];
        let maneuver = match rng.random_range(0..10) {
            0..=3 => Maneuver::Straight,
            4..=6 => Maneuver::Left,
            _ => Maneuver::Right,
        };
        let v = cruise_speed(spec, rng, 6.0, 9.0);
        let arrival = rng.random_range(1.0..4.0) + 3.0 * (i / 4) as f64;
        let radius = 6.0 + rng.random_range(0.0..2.0);
        plans.push((arm, maneuver, v, v * arrival, radius));
    }
    let mut drivers: Vec<Driver> = plans
        .iter()
        .map(|&(arm, m, v, approach, radius)| driver(intersection_path(arm, m, approach + 2.0 * LANE_OFFSET, radius), v, false))
        .collect();
    let init: Vec<VehicleState> = drivers.iter().map(|d| initial_state(&d.path, 0.0, d.free_speed)).collect();

    let clearance = 5.0;
    let mut conflicts = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            if plans[a].0 == plans[b].0 {
                // Same approach lane: the one further ahead leads.
                if plans[b].3 < plans[a].3 && drivers[a].leader.is_none() {
                    drivers[a].leader = Some(b);
                }
                continue;
            }
            let Some((sa, pa)) = drivers[a].path.first_near(&drivers[b].path, 1.5, 16.0) else {
                continue;
            };
            let Some((sb, _)) = drivers[b].path.first_near(&drivers[a].path, 1.5, 16.0) else {
                continue;
            };
            let ta = sa / plans[a].2;
            let tb = sb / plans[b].2;
            if (tb, b) < (ta, a) {
                drivers[a].rules.push(YieldRule {
                    other: b,
                    stop_s: (sa - clearance).max(0.0),
                    conflict_s: sa,
                    other_clear_s: sb + clearance,
                });
                conflicts.push(pa);
            }
        }
    }
    let geometry = Geometry {
        archetype: Archetype::Intersection,
        lanes: drivers.iter().map(|d| d.path.pts.iter().step_by(10).copied().collect()).collect(),
        conflict_points: conflicts,
    };
    Ok((drivers, init, geometry, Box::new(|_, _, _| None)))
}

/// Ring traffic circulating counter-clockwise in steady state, and entering
/// vehicles that give way to ring traffic about to pass their entry.
fn roundabout(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Built> {
    let p = spec.bicycle();
    let radius = spec.radius.unwrap_or_else(|| rng.random_range(10.0..14.0));
    let min_r = spec.min_turn_radius();
    if radius < min_r {
        return Err(Error::Infeasible(format!(
            "ring radius {radius} m is below the {min_r:.2} m the vehicle can hold"
        )));
    }
    let n_ring = spec.n_agents.div_ceil(2);
    let n_enter = spec.n_agents - n_ring;
    let v_ring = cruise_speed(spec, rng, 5.0, 7.0);
    let ring_len = v_ring * spec.dt * spec.duration_steps as f64 + 20.0;
    let beta = (p.l_r / radius).asin();
    let mut drivers = Vec::new();
    let mut init = Vec::new();
    let offset: f64 = rng.random_range(0.0..2.0 * PI);
    for i in 0..n_ring {
        let th = offset + 2.0 * PI * i as f64 / n_ring as f64 + rng.random_range(-0.2..0.2);
        let path = Path::new(&[Seg::Arc {
            center: [0.0, 0.0],
            radius,
            start: th,
            sweep: ring_len / radius,
        }]);
        init.push(VehicleState::new(
            radius * th.cos(),
            radius * th.sin(),
            wrap_angle(th + FRAC_PI_2 - beta),
            v_ring,
            beta,
        ));
        drivers.push(driver(path, v_ring, true));
    }
    let mut entries = Vec::new();
    let mut arms: Vec<usize> = (0..4).collect();
    arms.shuffle_with(rng);
    for k in 0..n_enter {
        let phi = arms[k % 4] as f64 * FRAC_PI_2;
        let approach = rng.random_range(25.0..40.0) + 10.0 * (k / 4) as f64;
        let sweep = rng.random_range(FRAC_PI_2..1.5 * PI);
        let entry_th = phi - 0.35;
        let (u, side) = (to_world([1.0, 0.0], phi), to_world([0.0, -1.0], phi));
        let lane = |d: f64| [u[0] * d + side[0] * 2.0, u[1] * d + side[1] * 2.0];
        let entry = [radius * entry_th.cos(), radius * entry_th.sin()];
        let exit_th = entry_th + sweep;
        let exit_pt = [radius * exit_th.cos(), radius * exit_th.sin()];
        let far = [exit_pt[0] * 6.0, exit_pt[1] * 6.0];
        let path = Path::new(&[
            Seg::Line(lane(radius + approach), lane(radius + 6.0)),
            Seg::Line(lane(radius + 6.0), entry),
            Seg::Arc { center: [0.0, 0.0], radius, start: entry_th, sweep },
            Seg::Line(exit_pt, far),
        ]);
        let v = cruise_speed(spec, rng, 5.0, 8.0);
        let entry_s = path.s[path.project(entry, 0)];
        entries.push((drivers.len(), entry_s, entry_th));
        init.push(initial_state(&path, 0.0, v));
        drivers.push(driver(path, v, false));
    }
    let conflict_points = entries
        .iter()
        .map(|&(_, _, th)| [radius * th.cos(), radius * th.sin()])
        .collect();
    let cap: Box<SpeedCap<'static>> = Box::new(move |i, ds: &[Driver], st: &[VehicleState]| {
        let &(_, entry_s, entry_th) = entries.iter().find(|e| e.0 == i)?;
        let d = &ds[i];
        let stop = entry_s - 4.0;
        if d.progress() > stop {
            return None;
        }
        let blocked = st.iter().take(n_ring).any(|s| {
            let th = s.y.atan2(s.x);
            let ahead = wrap_angle(entry_th - th);
            let t = ahead * radius / s.v.max(0.1);
            (-0.6..2.5).contains(&t)
        });
        blocked.then(|| stop_speed(stop - d.progress()))
    });
    let geometry = Geometry {
        archetype: Archetype::Roundabout,
        lanes: drivers.iter().map(|d| d.path.pts.iter().step_by(10).copied().collect()).collect(),
        conflict_points,
    };
    Ok((drivers, init, geometry, cap))
}

trait ShuffleWith {
    fn shuffle_with(&mut self, rng: &mut ChaCha8Rng);
}

impl<T> ShuffleWith for Vec<T> {
    fn shuffle_with(&mut self, rng: &mut ChaCha8Rng) {
        use rand::seq::SliceRandom;
        self.shuffle(rng);
    }
}

/// Controls recovered from consecutive states: `a = Δv/dt`, `β̇ = Δβ/dt`.
pub fn inverse_controls(states: &[VehicleState], dt: f64) -> Vec<ControlInput> {
    states
        .windows(2)
        .map(|w| ControlInput::new((w[1].v - w[0].v) / dt, wrap_angle(w[1].beta - w[0].beta) / dt))
        .collect()
}

/// Largest position gap between `states` and a re-simulation from its first
/// state under the recovered controls.
pub fn inverse_kinematics_residual(states: &[VehicleState], params: &BicycleParams) -> Result<f64> {
    let Some(first) = states.first() else {
        return Ok(0.0);
    };
    let replay = rollout(first, &inverse_controls(states, params.dt), params)?;
    Ok(replay
        .iter()
        .zip(&states[1..])
        .map(|(a, b)| dist([a.x, a.y], [b.x, b.y]))
        .fold(0.0, f64::max))
}

/// Extrapolate the last observed per-step displacement.
pub fn cvm_baseline(history: &[Point], t_f: usize) -> Result<Vec<Point>> {
    let n = history.len();
    if n < 2 {
        return Err(Error::InvalidArgument("constant-velocity baseline needs >= 2 history steps".into()));
    }
    let (p, q) = (history[n - 1], history[n - 2]);
    let v = [p[0] - q[0], p[1] - q[1]];
    Ok((1..=t_f).map(|k| [p[0] + k as f64 * v[0], p[1] + k as f64 * v[1]]).collect())
}

/// Hold the last observed second difference constant.
pub fn cam_baseline(history: &[Point], t_f: usize) -> Result<Vec<Point>> {
    let n = history.len();
    if n < 3 {
        return Err(Error::InvalidArgument("constant-acceleration baseline needs >= 3 history steps".into()));
    }
    let (p, q, r) = (history[n - 1], history[n - 2], history[n - 3]);
    let v = [p[0] - q[0], p[1] - q[1]];
    let a = [p[0] - 2.0 * q[0] + r[0], p[1] - 2.0 * q[1] + r[1]];
    Ok((1..=t_f)
        .map(|k| {
            let (k, tri) = (k as f64, (k * (k + 1)) as f64 / 2.0);
            [p[0] + k * v[0] + tri * a[0], p[1] + k * v[1] + tri * a[1]]
        })
        .collect())
}

/// Baseline predictions for every agent of a window, laid out
/// `[t_f][n_agents]`.
pub fn baseline_predictions(sample: &SceneSample, accel: bool) -> Result<Vec<Vec<Point>>> {
    let per_agent: Vec<Vec<Point>> = sample
        .trajectories
        .iter()
        .map(|a| {
            let hist: Vec<Point> = a.samples[..sample.t_h].iter().map(TrajectorySample::pos).collect();
            if accel {
                cam_baseline(&hist, sample.t_f)
            } else {
                cvm_baseline(&hist, sample.t_f)
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..sample.t_f).map(|k| per_agent.iter().map(|a| a[k]).collect()).collect())
}
